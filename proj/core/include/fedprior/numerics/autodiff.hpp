#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/tensor.hpp"

namespace fedprior::ad {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& dims() const { return value().dims(); }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Records a forward computation so that gradients of a scalar loss can be
/// propagated back to the trainable leaves.
///
/// A tape supports exactly one backward() call. References returned by
/// value() remain valid for the lifetime of the tape. Nodes are appended in
/// evaluation order, which is therefore a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-trainable input.
  Var constant(Tensor value);
  /// Trainable leaf identified by `path` in the returned gradients.
  Var leaf(const std::string& path, Tensor value);
  /// Registers every tensor of `params` as a leaf.
  std::map<std::string, Var> leaves(const ParamSet& params);

  /// Records an op output. `fn` receives the gradient flowing into this node
  /// and must accumulate into its parents via grad_buffer()/accumulate().
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  /// Mutable gradient buffer of `v`, zero-initialised on first use.
  Tensor& grad_buffer(Var v);
  void accumulate(Var v, const Tensor& g);

  /// Reverse pass from a scalar loss. Returns one gradient per leaf; leaves
  /// that do not influence the loss get zeros.
  ParamSet backward(Var loss);

  std::size_t num_nodes() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;  // deque: value() references stay valid as the tape grows
  std::vector<Tensor> grads_;
  std::vector<std::pair<std::string, std::uint32_t>> leaves_;
  bool consumed_ = false;
};

// Elementwise ---------------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var offset(Var a, double c);
Var reciprocal(Var a);
Var relu(Var a);
Var gelu(Var a);
/// Multiplies every element of `a` by the single-element tensor `s`.
Var mul_scalar(Var a, Var s);

// Row broadcasting on [R, C] ------------------------------------------------
/// x[r, c] + b[c]; `b` may be [C] or [1, C].
Var add_row(Var x, Var b);
/// x[r, c] * g[c]; `g` may be [C] or [1, C].
Var mul_row(Var x, Var g);

// Reductions -------------------------------------------------------------------
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);

// Linear algebra ----------------------------------------------------------------
Var matmul(Var a, Var b);
Var transpose(Var a);

// Row-wise normalisation ----------------------------------------------------------
/// Softmax over the last axis of a rank-2 tensor. When `allowed` is non-empty it
/// is a row-major [R, C] permission matrix; disallowed entries get probability 0.
Var softmax_rows(Var x, std::span<const std::uint8_t> allowed = {});
/// Mean of -log softmax(logits)[t, targets[t]].
Var cross_entropy(Var logits, std::span<const std::uint32_t> targets);
/// (x - mean) / sqrt(var + eps) per row; population variance.
Var layer_norm_rows(Var x, double eps = 1e-5);
/// x / ||x|| per row.
Var l2_normalize_rows(Var x);

// Structural --------------------------------------------------------------------
Var reshape(Var a, Shape dims);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t r0, std::size_t r1);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t c0, std::size_t c1);
/// table[indices[i], :] for each i.
Var gather_rows(Var table, std::span<const std::uint32_t> indices);

/// Sparse linear map over the rows of x[N_in, C]: out[o, :] = sum w * x[i, :].
struct RowMap {
  std::size_t rows_in = 0;
  std::size_t rows_out = 0;
  struct Entry {
    std::uint32_t out;
    std::uint32_t in;
    double weight;
  };
  std::vector<Entry> entries;
};
Var apply_row_map(Var x, const RowMap& map);

// Convolution ---------------------------------------------------------------------
/// 3x3 convolution of x[H, W, Cin] with zero padding 1.
/// `weight` is [9 * Cin, Cout] (im2col layout: ky, kx, cin), `bias` is [Cout].
Var conv3x3(Var x, Var weight, Var bias, std::size_t stride = 1);

// Complex / Fourier ------------------------------------------------------------------
/// Centered orthonormal 2D DFT of a complex image x[H, W, 2].
Var dft2(Var x, bool inverse);
/// Pointwise complex product with a constant c[H, W, 2] (conjugated if `conj`).
Var complex_mul(Var x, const Tensor& c, bool conj = false);

// Estimators ------------------------------------------------------------------------
/// Forward value `quantized`, gradient passed unchanged to `z`.
Var straight_through(Var z, Tensor quantized);

}  // namespace fedprior::ad
