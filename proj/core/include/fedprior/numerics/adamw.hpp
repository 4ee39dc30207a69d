#pragma once

#include <cstddef>
#include <cstdint>

#include "fedprior/numerics/param_set.hpp"

namespace fedprior {

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double eps = 1e-8;
};

struct AdamWState {
  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;
};

/// One AdamW step with decoupled weight decay. `state.step` is incremented
/// before bias correction, so the first call uses step 1.
void adamw_step(ParamSet& params, const ParamSet& grads, AdamWState& state, const AdamWHyper& hyper);

/// Cosine decay from `base` at step 0 to `base * final_fraction` at `total`.
double cosine_lr(double base, double final_fraction, std::size_t step, std::size_t total);

}  // namespace fedprior
