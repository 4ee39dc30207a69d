#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/autodiff.hpp"
#include "fedprior/numerics/fourier.hpp"

namespace fedprior::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("op mixes Vars from different tapes");
  return *a.tape();
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.dims()));
}

/// Applies `d` (dOut -> dParent contribution) only when the parent is trainable.
template <typename F>
void push_grad(Tape& tape, Var parent, F&& fill) {
  if (!tape.requires_grad(parent)) return;
  fill(tape.grad_buffer(parent));
}

template <typename F>
Var unary(Var a, F&& f, Tape::BackwardFn bw) {
  const Tensor& x = a.value();
  Tensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape()->record(std::move(out), {a}, std::move(bw));
}

std::size_t row_broadcast_len(const Tensor& x, const Tensor& b, const char* op) {
  require_rank2(x, op);
  if (b.size() != x.dim(1) || (b.rank() == 2 && b.dim(0) != 1) || b.rank() > 2) {
    throw ShapeError(std::string(op) + ": broadcast operand " + shape_str(b.dims()) + " does not match " +
                     shape_str(x.dims()));
  }
  return x.dim(1);
}

}  // namespace

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_dims(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_dims(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    push_grad(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_dims(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    });
    push_grad(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    });
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [a, c](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  });
}

Var offset(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var reciprocal(Var a) {
  return unary(a, [](double x) { return 1.0 / x; }, [a](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] / (x[i] * x[i]);
    });
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [a](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) ga[i] += g[i];
      }
    });
  });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [a](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        push_grad(t, a, [&](Tensor& ga) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            ga[i] += g[i] * (cdf + x[i] * pdf);
          }
        });
      });
}

Var mul_scalar(Var a, Var s) {
  Tape& tape = same_tape(a, s);
  const double sv = s.value().item();
  Tensor out = a.value();
  for (auto& v : out.values()) v *= sv;
  return tape.record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double sv = s.value().item();
    const Tensor& av = a.value();
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    });
    push_grad(t, s, [&](Tensor& gs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      gs[0] += acc;
    });
  });
}

Var add_row(Var x, Var b) {
  Tape& tape = same_tape(x, b);
  const std::size_t cols = row_broadcast_len(x.value(), b.value(), "add_row");
  const std::size_t rows = x.value().dim(0);
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return tape.record(std::move(out), {x, b}, [x, b, rows, cols](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    push_grad(t, b, [&](Tensor& gb) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  });
}

Var mul_row(Var x, Var gain) {
  Tape& tape = same_tape(x, gain);
  const std::size_t cols = row_broadcast_len(x.value(), gain.value(), "mul_row");
  const std::size_t rows = x.value().dim(0);
  Tensor out = x.value();
  const Tensor& gv = gain.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= gv[c];
  }
  return tape.record(std::move(out), {x, gain}, [x, gain, rows, cols](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    push_grad(t, x, [&](Tensor& gx) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * gv[c];
      }
    });
    push_grad(t, gain, [&](Tensor& gg) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xv[r * cols + c];
      }
    });
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  return a.tape()->record(Tensor::scalar(acc), {a}, [a](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (auto& v : ga.values()) v += g[0];
    });
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  return a.tape()->record(Tensor::scalar(acc / n), {a}, [a, n](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (auto& v : ga.values()) v += g[0] / n;
    });
  });
}

Var mse(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_dims(a.value(), b.value(), "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double n = static_cast<double>(av.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  return tape.record(Tensor::scalar(acc / n), {a, b}, [a, b, n](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const double k = 2.0 * g[0] / n;
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
    });
    push_grad(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
    });
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(av.dims()) + " x " + shape_str(bv.dims()));
  }
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const auto gm = as_mat(g, m, n);
    push_grad(t, a, [&](Tensor& ga) { as_mat(ga, m, k).noalias() += gm * as_mat(b.value(), k, n).transpose(); });
    push_grad(t, b, [&](Tensor& gb) { as_mat(gb, k, n).noalias() += as_mat(a.value(), m, k).transpose() * gm; });
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  as_mat(out, n, m) = as_mat(av, m, n).transpose();
  return a.tape()->record(std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) { as_mat(ga, m, n) += as_mat(g, n, m).transpose(); });
  });
}

Var softmax_rows(Var x, std::span<const std::uint8_t> allowed) {
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (!allowed.empty() && allowed.size() != rows * cols) {
    throw ShapeError("softmax_rows: mask size does not match " + shape_str(xv.dims()));
  }
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const std::uint8_t* ok = allowed.empty() ? nullptr : allowed.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!ok || ok[c]) mx = std::max(mx, in[c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("softmax_rows: row " + std::to_string(r) + " has no permitted entries");
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = (!ok || ok[c]) ? std::exp(in[c] - mx) : 0.0;
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  Tensor probs = out;
  return x.tape()->record(std::move(out), {x}, [x, probs = std::move(probs), rows, cols](Tape& t, const Tensor& g) {
    push_grad(t, x, [&](Tensor& gx) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = probs.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += pr[c] * gr[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += pr[c] * (gr[c] - dot);
      }
    });
  });
}

Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
  const Tensor& lv = logits.value();
  require_rank2(lv, "cross_entropy");
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  }
  Tensor probs({rows, cols});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0," +
                       std::to_string(cols) + ")");
    }
    const double* in = lv.data() + r * cols;
    double* p = probs.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(in[c] - mx);
      z += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    total += std::log(z) + mx - in[targets[r]];
  }
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  return logits.tape()->record(
      Tensor::scalar(total / static_cast<double>(rows)), {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), rows, cols](Tape& t, const Tensor& g) {
        const double k = g[0] / static_cast<double>(rows);
        push_grad(t, logits, [&](Tensor& gl) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += k * probs[r * cols + c];
            gl[r * cols + tgt[r]] -= k;
          }
        });
      });
}

Var layer_norm_rows(Var x, double eps) {
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out({rows, cols});
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (in[c] - mu) * inv_std[r];
  }
  Tensor normed = out;
  return x.tape()->record(std::move(out), {x},
                          [x, normed = std::move(normed), inv_std = std::move(inv_std), rows, cols](
                              Tape& t, const Tensor& g) {
                            push_grad(t, x, [&](Tensor& gx) {
                              const double n = static_cast<double>(cols);
                              for (std::size_t r = 0; r < rows; ++r) {
                                const double* y = normed.data() + r * cols;
                                const double* gr = g.data() + r * cols;
                                double mg = 0.0, mgy = 0.0;
                                for (std::size_t c = 0; c < cols; ++c) {
                                  mg += gr[c];
                                  mgy += gr[c] * y[c];
                                }
                                mg /= n;
                                mgy /= n;
                                for (std::size_t c = 0; c < cols; ++c) {
                                  gx[r * cols + c] += inv_std[r] * (gr[c] - mg - y[c] * mgy);
                                }
                              }
                            });
                          });
}

Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  require_rank2(xv, "l2_normalize_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out({rows, cols});
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv[r * cols + c] * xv[r * cols + c];
    norms[r] = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / norms[r];
  }
  Tensor y = out;
  return x.tape()->record(
      std::move(out), {x},
      [x, y = std::move(y), norms = std::move(norms), rows, cols](Tape& t, const Tensor& g) {
        push_grad(t, x, [&](Tensor& gx) {
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
              gx[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
            }
          }
        });
      });
}

Var reshape(Var a, Shape dims) {
  Tensor out = a.value().reshaped(std::move(dims));
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape* tape = parts.front().tape();
  const std::size_t cols = parts.front().value().dim(1);
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_rank2(p.value(), "concat_rows");
    if (p.value().dim(1) != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.value().dim(0);
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return tape->record(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      push_grad(t, p, [&](Tensor& gp) {
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      });
      off += n;
    }
  });
}

Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  const Tensor& av = a.value();
  require_rank2(av, "slice_rows");
  if (r0 >= r1 || r1 > av.dim(0)) throw ShapeError("slice_rows: bad range for " + shape_str(av.dims()));
  const std::size_t cols = av.dim(1);
  Tensor out({r1 - r0, cols});
  std::copy(av.data() + r0 * cols, av.data() + r1 * cols, out.data());
  return a.tape()->record(std::move(out), {a}, [a, r0, cols](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[r0 * cols + i] += g[i];
    });
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape* tape = parts.front().tape();
  const std::size_t rows = parts.front().value().dim(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.value().dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.value().dim(1);
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.value().dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p.value().data() + r * pc, p.value().data() + (r + 1) * pc, out.data() + r * cols + c0);
    }
    c0 += pc;
  }
  return tape->record(std::move(out), parts, [parts, rows, cols](Tape& t, const Tensor& g) {
    std::size_t c0 = 0;
    for (const Var& p : parts) {
      const std::size_t pc = p.value().dim(1);
      push_grad(t, p, [&](Tensor& gp) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + c0 + c];
        }
      });
      c0 += pc;
    }
  });
}

Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  const Tensor& av = a.value();
  require_rank2(av, "slice_cols");
  if (c0 >= c1 || c1 > av.dim(1)) throw ShapeError("slice_cols: bad range for " + shape_str(av.dims()));
  const std::size_t rows = av.dim(0), cols = av.dim(1), w = c1 - c0;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(av.data() + r * cols + c0, av.data() + r * cols + c1, out.data() + r * w);
  }
  return a.tape()->record(std::move(out), {a}, [a, c0, rows, cols, w](Tape& t, const Tensor& g) {
    push_grad(t, a, [&](Tensor& ga) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) ga[r * cols + c0 + c] += g[r * w + c];
      }
    });
  });
}

Var gather_rows(Var table, std::span<const std::uint32_t> indices) {
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  const std::size_t cols = tv.dim(1);
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.dim(0)) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " outside table of " +
                       std::to_string(tv.dim(0)) + " rows");
    }
    std::copy(tv.data() + indices[i] * cols, tv.data() + (indices[i] + 1) * cols, out.data() + i * cols);
  }
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return table.tape()->record(std::move(out), {table}, [table, idx = std::move(idx), cols](Tape& t, const Tensor& g) {
    push_grad(t, table, [&](Tensor& gt) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) gt[idx[i] * cols + c] += g[i * cols + c];
      }
    });
  });
}

Var apply_row_map(Var x, const RowMap& map) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.size() / map.rows_in;
  if (map.rows_in * cols != xv.size()) {
    throw ShapeError("apply_row_map: input " + shape_str(xv.dims()) + " is not " + std::to_string(map.rows_in) +
                     " rows");
  }
  Tensor out({map.rows_out, cols});
  for (const auto& e : map.entries) {
    const double* in = xv.data() + e.in * cols;
    double* o = out.data() + e.out * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] += e.weight * in[c];
  }
  return x.tape()->record(std::move(out), {x}, [x, map, cols](Tape& t, const Tensor& g) {
    push_grad(t, x, [&](Tensor& gx) {
      for (const auto& e : map.entries) {
        const double* go = g.data() + e.out * cols;
        double* gi = gx.data() + e.in * cols;
        for (std::size_t c = 0; c < cols; ++c) gi[c] += e.weight * go[c];
      }
    });
  });
}

Var conv3x3(Var x, Var weight, Var bias, std::size_t stride) {
  Tape& tape = same_tape(x, weight);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 3) throw ShapeError("conv3x3: input must be [H,W,C], got " + shape_str(xv.dims()));
  if (stride != 1 && stride != 2) throw ShapeError("conv3x3: stride must be 1 or 2");
  const std::size_t h = xv.dim(0), w = xv.dim(1), cin = xv.dim(2);
  require_rank2(wv, "conv3x3 weight");
  if (wv.dim(0) != 9 * cin) {
    throw ShapeError("conv3x3: weight " + shape_str(wv.dims()) + " does not match " + std::to_string(cin) +
                     " input channels");
  }
  const std::size_t cout = wv.dim(1);
  if (bias.value().size() != cout) throw ShapeError("conv3x3: bias size does not match output channels");
  const std::size_t ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  const std::size_t k = 9 * cin;

  Tensor cols({ho * wo, k});
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* row = cols.data() + (oy * wo + ox) * k;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
          double* dst = row + (ky * 3 + kx) * cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* src = xv.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          std::copy(src, src + cin, dst);
        }
      }
    }
  }
  Tensor out({ho, wo, cout});
  auto om = as_mat(out, ho * wo, cout);
  om.noalias() = as_mat(cols, ho * wo, k) * as_mat(wv, k, cout);
  const Tensor& bv = bias.value();
  for (std::size_t p = 0; p < ho * wo; ++p) {
    for (std::size_t c = 0; c < cout; ++c) out[p * cout + c] += bv[c];
  }
  return tape.record(std::move(out), {x, weight, bias},
                     [x, weight, bias, cols = std::move(cols), h, w, cin, cout, ho, wo, k, stride](
                         Tape& t, const Tensor& g) {
                       const auto gm = as_mat(g, ho * wo, cout);
                       push_grad(t, weight, [&](Tensor& gw) {
                         as_mat(gw, k, cout).noalias() += as_mat(cols, ho * wo, k).transpose() * gm;
                       });
                       push_grad(t, bias, [&](Tensor& gb) {
                         for (std::size_t p = 0; p < ho * wo; ++p) {
                           for (std::size_t c = 0; c < cout; ++c) gb[c] += g[p * cout + c];
                         }
                       });
                       push_grad(t, x, [&](Tensor& gx) {
                         RowMat dcols = gm * as_mat(weight.value(), k, cout).transpose();
                         for (std::size_t oy = 0; oy < ho; ++oy) {
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             const double* row = dcols.data() + (oy * wo + ox) * k;
                             for (std::size_t ky = 0; ky < 3; ++ky) {
                               const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                               for (std::size_t kx = 0; kx < 3; ++kx) {
                                 const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                                 if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                 double* dst =
                                     gx.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                                 const double* src = row + (ky * 3 + kx) * cin;
                                 for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                               }
                             }
                           }
                         }
                       });
                     });
}

Var dft2(Var x, bool inverse) {
  Tensor out = centered_dft2(x.value(), inverse);
  return x.tape()->record(std::move(out), {x}, [x, inverse](Tape& t, const Tensor& g) {
    // The real adjoint of a unitary complex map is its inverse.
    push_grad(t, x, [&](Tensor& gx) {
      const Tensor back = centered_dft2(g, !inverse);
      for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
    });
  });
}

Var complex_mul(Var x, const Tensor& c, bool conj) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || xv.dim(2) != 2) throw ShapeError("complex_mul: expected [H,W,2]");
  require_same_dims(xv, c, "complex_mul");
  const double s = conj ? -1.0 : 1.0;
  const std::size_t n = xv.size() / 2;
  Tensor out(xv.dims());
  out.set_complex(true);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = xv[2 * i], b = xv[2 * i + 1];
    const double cr = c[2 * i], ci = s * c[2 * i + 1];
    out[2 * i] = a * cr - b * ci;
    out[2 * i + 1] = a * ci + b * cr;
  }
  return x.tape()->record(std::move(out), {x}, [x, c, s, n](Tape& t, const Tensor& g) {
    // Multiply the gradient by the conjugate of the (possibly conjugated) constant.
    push_grad(t, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < n; ++i) {
        const double gr = g[2 * i], gi = g[2 * i + 1];
        const double cr = c[2 * i], ci = s * c[2 * i + 1];
        gx[2 * i] += gr * cr + gi * ci;
        gx[2 * i + 1] += gi * cr - gr * ci;
      }
    });
  });
}

Var straight_through(Var z, Tensor quantized) {
  require_same_dims(z.value(), quantized, "straight_through");
  return z.tape()->record(std::move(quantized), {z}, [z](Tape& t, const Tensor& g) { t.accumulate(z, g); });
}

}  // namespace fedprior::ad
