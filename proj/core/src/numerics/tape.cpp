#include "fedprior/errors.hpp"
#include "fedprior/numerics/autodiff.hpp"

namespace fedprior::ad {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, false});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::leaf(const std::string& path, Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, true});
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  leaves_.emplace_back(path, id);
  return Var(this, id);
}

std::map<std::string, Var> Tape::leaves(const ParamSet& params) {
  std::map<std::string, Var> out;
  for (const auto& [path, t] : params) out.emplace(path, leaf(path, t));
  return out;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError("op mixes Vars from different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs ? std::move(fn) : nullptr, needs});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError("op mixes Vars from different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs ? std::move(fn) : nullptr, needs});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(Var v) {
  Tensor& g = grads_.at(v.id());
  if (g.empty()) g = Tensor(nodes_[v.id()].value.dims());
  return g;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Tensor& buf = grad_buffer(v);
  require_same_dims(buf, g, "gradient accumulation");
  double* b = buf.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) b[i] += s[i];
}

ParamSet Tape::backward(Var loss) {
  if (consumed_) throw ContractError("backward() called twice on the same tape");
  if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (value(loss).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got dims " + shape_str(value(loss).dims()));
  }
  consumed_ = true;
  grads_.assign(nodes_.size(), Tensor());
  grads_[loss.id()] = Tensor(value(loss).dims(), 1.0);
  for (std::int64_t i = loss.id(); i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.backward || grads_[static_cast<std::size_t>(i)].empty()) continue;
    // Move the gradient out so intermediates are released as we go.
    Tensor g = std::move(grads_[static_cast<std::size_t>(i)]);
    node.backward(*this, g);
    node.backward = nullptr;
  }
  ParamSet out;
  for (const auto& [path, id] : leaves_) {
    Tensor g = grads_[id].empty() ? Tensor(nodes_[id].value.dims()) : std::move(grads_[id]);
    if (nodes_[id].value.is_complex()) g.set_complex(true);
    out.add(path, std::move(g));
  }
  return out;
}

}  // namespace fedprior::ad
