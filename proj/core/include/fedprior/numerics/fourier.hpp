#pragma once

#include "fedprior/numerics/tensor.hpp"

namespace fedprior {

/// Centered orthonormal 2D DFT of a complex image [H, W, 2]: DC sits at
/// (H/2, W/2) and both directions are scaled by 1/sqrt(HW).
Tensor centered_dft2(const Tensor& image, bool inverse);

}  // namespace fedprior
