#include "fedprior/numerics/param_set.hpp"

#include "fedprior/errors.hpp"

namespace fedprior {

void ParamSet::add(const std::string& path, Tensor value) {
  auto [it, inserted] = entries_.emplace(path, std::move(value));
  if (!inserted) throw ContractError("duplicate parameter path: " + path);
}

const Tensor& ParamSet::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw IndexError("unknown parameter path: " + path);
  return it->second;
}

Tensor& ParamSet::at(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw IndexError("unknown parameter path: " + path);
  return it->second;
}

std::size_t ParamSet::num_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

std::vector<std::string> ParamSet::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [p, _] : entries_) out.push_back(p);
  return out;
}

bool ParamSet::shape_compatible(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.dims() != b->second.dims()) return false;
  }
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [p, t] : entries_) {
    Tensor z(t.dims());
    if (t.is_complex()) z.set_complex(true);
    out.entries_.emplace_hint(out.entries_.end(), p, std::move(z));
  }
  return out;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(num_values());
  for (const auto& [_, t] : entries_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

ParamSet ParamSet::unflatten(const std::vector<double>& flat) const {
  if (flat.size() != num_values()) {
    throw ShapeError("unflatten: expected " + std::to_string(num_values()) + " values, got " +
                     std::to_string(flat.size()));
  }
  ParamSet out = *this;
  std::size_t off = 0;
  for (auto& [_, t] : out.entries_) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data());
    off += t.size();
  }
  return out;
}

bool bit_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !bit_equal(ia->second, ib->second)) return false;
  }
  return true;
}

}  // namespace fedprior
