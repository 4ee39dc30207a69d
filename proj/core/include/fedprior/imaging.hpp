#pragma once

#include <cstddef>
#include <cstdint>

#include "fedprior/numerics/tensor.hpp"

/// MRI forward model A = M F C, its adjoint, sampling masks, coil maps and
/// image-quality metrics.
///
/// Complex images are [H, W, 2] tensors; multi-coil k-space is [C, H, W, 2].
/// Magnitude images used by the metrics are real [H, W] tensors.
namespace fedprior::imaging {

/// Binary Cartesian sampling pattern with a fully sampled centre block.
struct Mask {
  Tensor bits;  // [H, W], entries 0 or 1
  double acceleration = 1.0;
  std::size_t acs_half_width = 0;
  std::uint64_t seed = 0;

  std::size_t height() const { return bits.dim(0); }
  std::size_t width() const { return bits.dim(1); }
  std::size_t count() const;
};

/// Complex coil sensitivities [C, H, W, 2] with unit sum-of-squares per pixel.
struct CoilSet {
  Tensor sens;

  std::size_t ncoils() const { return sens.dim(0); }
  std::size_t height() const { return sens.dim(1); }
  std::size_t width() const { return sens.dim(2); }
  /// Sensitivity of coil `c` as an [H, W, 2] image.
  Tensor coil(std::size_t c) const;

  /// Single unit-sensitivity coil (single-coil mode).
  static CoilSet unit(std::size_t h, std::size_t w);
};

class ImagingOperator {
 public:
  ImagingOperator(Mask mask, CoilSet coils);

  const Mask& mask() const noexcept { return mask_; }
  const CoilSet& coils() const noexcept { return coils_; }
  std::size_t height() const { return mask_.height(); }
  std::size_t width() const { return mask_.width(); }

 private:
  Mask mask_;
  CoilSet coils_;
};

/// Centered orthonormal 2D DFT.
Tensor dft2(const Tensor& image, bool inverse = false);

/// ceil(H / 16).
std::size_t default_acs_half_width(std::size_t h);

/// Variable-density mask with exactly round(H W / R) samples: a fully sampled
/// (2a) x (2a) centre block plus samples drawn without replacement with
/// probability proportional to exp(-|k - centre|^2 / (2 sigma^2)), sigma = H / 4.
Mask gen_vd_mask(std::size_t h, std::size_t w, double acceleration, std::size_t acs_half_width, std::uint64_t seed);

/// Smooth Gaussian-bump coils on a circle of radius H/3 with linear phase
/// ramps, normalised to unit sum-of-squares.
CoilSet gen_coils(std::size_t h, std::size_t w, std::size_t ncoils, std::uint64_t seed);

/// y_c = M .* F(C_c .* x).
Tensor forward_op(const Tensor& image, const ImagingOperator& op);
/// x = sum_c conj(C_c) .* F^-1(M .* y_c); the zero-filled coil-combined image.
Tensor adjoint_op(const Tensor& kspace, const ImagingOperator& op);

/// ||M .* (A x - y)|| / ||y||.
double dc_residual(const Tensor& image, const Tensor& kspace, const ImagingOperator& op);

/// |x| of a complex [H, W, 2] image.
Tensor magnitude(const Tensor& image);

/// 10 log10(1 / MSE) for images with peak 1; +inf for identical inputs.
double psnr(const Tensor& ref, const Tensor& test);

/// Mean SSIM over all valid 7x7 uniform windows, C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Tensor& ref, const Tensor& test);

inline constexpr std::size_t kSsimWindow = 7;

}  // namespace fedprior::imaging
