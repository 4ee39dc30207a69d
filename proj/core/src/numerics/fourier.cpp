#include "fedprior/numerics/fourier.hpp"

#include <Eigen/Core>
#include <cmath>
#include <complex>
#include <numbers>
#include <unordered_map>

#include "fedprior/errors.hpp"

namespace fedprior {
namespace {

using CMat = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// W[k, n] = exp(-+2 pi i (k - N/2)(n - N/2) / N) / sqrt(N); symmetric in k, n.
const CMat& dft_matrix(std::size_t n, bool inverse) {
  thread_local std::unordered_map<std::size_t, CMat> cache;
  const std::size_t key = n * 2 + (inverse ? 1 : 0);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const auto nn = static_cast<long long>(n);
  const double sign = inverse ? 1.0 : -1.0;
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  CMat m(nn, nn);
  for (long long r = 0; r < nn; ++r) {
    for (long long c = 0; c < nn; ++c) {
      // Reduce the phase index modulo N so the angle stays in [0, 2 pi).
      const long long prod = (r - nn / 2) * (c - nn / 2);
      const long long red = ((prod % nn) + nn) % nn;
      m(r, c) = std::polar(norm, sign * 2.0 * std::numbers::pi * static_cast<double>(red) / static_cast<double>(nn));
    }
  }
  return cache.emplace(key, std::move(m)).first->second;
}

}  // namespace

Tensor centered_dft2(const Tensor& x, bool inverse) {
  if (x.rank() != 3 || x.dim(2) != 2) throw ShapeError("dft2: expected complex [H,W,2], got " + shape_str(x.dims()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (h < 2 || w < 2) throw ShapeError("dft2: image must be at least 2x2");
  CMat in(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (std::size_t i = 0; i < h * w; ++i) in.data()[i] = {x[2 * i], x[2 * i + 1]};
  const CMat res = dft_matrix(h, inverse) * in * dft_matrix(w, inverse);
  Tensor out({h, w, 2});
  out.set_complex(true);
  for (std::size_t i = 0; i < h * w; ++i) {
    out[2 * i] = res.data()[i].real();
    out[2 * i + 1] = res.data()[i].imag();
  }
  return out;
}

}  // namespace fedprior
