#include "fedprior/numerics/adamw.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fedprior/errors.hpp"

namespace fedprior {

void adamw_step(ParamSet& params, const ParamSet& grads, AdamWState& state, const AdamWHyper& hyper) {
  if (!params.shape_compatible(grads)) throw ShapeError("adamw_step: gradients do not match parameters");
  if (state.m.empty() && state.v.empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  } else if (!params.shape_compatible(state.m) || !params.shape_compatible(state.v)) {
    throw ShapeError("adamw_step: optimizer state does not match parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  const double decay = 1.0 - hyper.lr * hyper.weight_decay;

  auto g_it = grads.begin();
  auto m_it = state.m.begin();
  auto v_it = state.v.begin();
  for (auto p_it = params.begin(); p_it != params.end(); ++p_it, ++g_it, ++m_it, ++v_it) {
    double* p = p_it->second.data();
    const double* g = g_it->second.data();
    double* m = m_it->second.data();
    double* v = v_it->second.data();
    const std::size_t n = p_it->second.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] = p[i] * decay;
      if (m_hat != 0.0) p[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

double cosine_lr(double base, double final_fraction, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

}  // namespace fedprior
