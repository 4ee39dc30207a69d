#include "fedprior/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/fourier.hpp"
#include "fedprior/numerics/rng.hpp"

namespace fedprior::imaging {
namespace {

void require_image(const Tensor& x, std::size_t h, std::size_t w, const char* what) {
  if (x.rank() != 3 || x.dim(0) != h || x.dim(1) != w || x.dim(2) != 2) {
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(h) + "," + std::to_string(w) +
                     ",2], got " + shape_str(x.dims()));
  }
}

void require_kspace(const Tensor& y, const ImagingOperator& op, const char* what) {
  if (y.rank() != 4 || y.dim(0) != op.coils().ncoils() || y.dim(1) != op.height() || y.dim(2) != op.width() ||
      y.dim(3) != 2) {
    throw ShapeError(std::string(what) + ": k-space " + shape_str(y.dims()) + " does not match operator");
  }
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.values().begin(), bits.values().end(), 1.0));
}

Tensor CoilSet::coil(std::size_t c) const {
  const std::size_t n = height() * width() * 2;
  Tensor out({height(), width(), 2});
  std::copy(sens.data() + c * n, sens.data() + (c + 1) * n, out.data());
  out.set_complex(true);
  return out;
}

CoilSet CoilSet::unit(std::size_t h, std::size_t w) {
  Tensor s({1, h, w, 2});
  for (std::size_t i = 0; i < h * w; ++i) s[2 * i] = 1.0;
  s.set_complex(true);
  return CoilSet{std::move(s)};
}

ImagingOperator::ImagingOperator(Mask mask, CoilSet coils) : mask_(std::move(mask)), coils_(std::move(coils)) {
  if (mask_.bits.rank() != 2 || coils_.sens.rank() != 4 || coils_.height() != mask_.height() ||
      coils_.width() != mask_.width()) {
    throw ShapeError("imaging operator: mask " + shape_str(mask_.bits.dims()) + " and coils " +
                     shape_str(coils_.sens.dims()) + " disagree");
  }
}

Tensor dft2(const Tensor& image, bool inverse) { return centered_dft2(image, inverse); }

std::size_t default_acs_half_width(std::size_t h) { return (h + 15) / 16; }

Mask gen_vd_mask(std::size_t h, std::size_t w, double acceleration, std::size_t a, std::uint64_t seed) {
  if (h < 2 || w < 2) throw ConfigError("mask dimensions must be at least 2x2");
  if (!(acceleration >= 1.0)) throw ConfigError("acceleration must be >= 1");
  const auto budget = static_cast<std::size_t>(std::llround(static_cast<double>(h * w) / acceleration));
  if (budget < 4 * a * a || 2 * a > h || 2 * a > w) {
    throw ConfigError("sampling budget " + std::to_string(budget) + " cannot hold the " + std::to_string(2 * a) + "x" +
                      std::to_string(2 * a) + " calibration block");
  }
  Mask m{Tensor({h, w}), acceleration, a, seed};
  const std::size_t cy = h / 2, cx = w / 2;
  for (std::size_t y = cy - a; y < cy + a; ++y) {
    for (std::size_t x = cx - a; x < cx + a; ++x) m.bits.at(y, x) = 1.0;
  }
  // Weighted sampling without replacement via exponential keys log(u) / w:
  // taking the largest keys is equivalent to sequential proportional draws.
  const double sigma = static_cast<double>(h) / 4.0;
  Rng rng(seed);
  std::vector<std::pair<double, std::size_t>> keys;
  keys.reserve(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = rng.uniform();
      if (m.bits.at(y, x) != 0.0) continue;
      const double dy = static_cast<double>(y) - static_cast<double>(cy);
      const double dx = static_cast<double>(x) - static_cast<double>(cx);
      const double log_weight = -(dy * dy + dx * dx) / (2.0 * sigma * sigma);
      const double log_u = std::log(std::max(u, std::numeric_limits<double>::min()));
      keys.emplace_back(log_u * std::exp(-log_weight), y * w + x);
    }
  }
  const std::size_t extra = budget - 4 * a * a;
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(extra), keys.end(),
                    [](const auto& l, const auto& r) { return l.first > r.first || (l.first == r.first && l.second < r.second); });
  for (std::size_t i = 0; i < extra; ++i) m.bits[keys[i].second] = 1.0;
  return m;
}

CoilSet gen_coils(std::size_t h, std::size_t w, std::size_t ncoils, std::uint64_t seed) {
  if (ncoils == 0) throw ConfigError("ncoils must be >= 1");
  Rng rng(seed);
  const double rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double radius = static_cast<double>(h) / 3.0;
  const double width = static_cast<double>(h) / 2.0;
  const double cy = static_cast<double>(h) / 2.0, cx = static_cast<double>(w) / 2.0;
  Tensor s({ncoils, h, w, 2});
  for (std::size_t c = 0; c < ncoils; ++c) {
    const double ang = rotation + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(ncoils);
    const double py = cy + radius * std::sin(ang), px = cx + radius * std::cos(ang);
    const double ramp_y = rng.uniform(-0.5, 0.5), ramp_x = rng.uniform(-0.5, 0.5);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - py, dx = static_cast<double>(x) - px;
        const double mag = std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
        const double phase = 2.0 * std::numbers::pi *
                             (ramp_y * static_cast<double>(y) / static_cast<double>(h) +
                              ramp_x * static_cast<double>(x) / static_cast<double>(w));
        const std::size_t i = ((c * h + y) * w + x) * 2;
        s[i] = mag * std::cos(phase);
        s[i + 1] = mag * std::sin(phase);
      }
    }
  }
  for (std::size_t p = 0; p < h * w; ++p) {
    double ss = 0.0;
    for (std::size_t c = 0; c < ncoils; ++c) {
      const std::size_t i = (c * h * w + p) * 2;
      ss += s[i] * s[i] + s[i + 1] * s[i + 1];
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t c = 0; c < ncoils; ++c) {
      const std::size_t i = (c * h * w + p) * 2;
      s[i] *= inv;
      s[i + 1] *= inv;
    }
  }
  s.set_complex(true);
  return CoilSet{std::move(s)};
}

Tensor forward_op(const Tensor& image, const ImagingOperator& op) {
  const std::size_t h = op.height(), w = op.width(), nc = op.coils().ncoils();
  require_image(image, h, w, "forward_op");
  Tensor y({nc, h, w, 2});
  y.set_complex(true);
  const Tensor& m = op.mask().bits;
  const Tensor& s = op.coils().sens;
  for (std::size_t c = 0; c < nc; ++c) {
    Tensor ci({h, w, 2});
    for (std::size_t p = 0; p < h * w; ++p) {
      const double sr = s[(c * h * w + p) * 2], si = s[(c * h * w + p) * 2 + 1];
      const double xr = image[2 * p], xi = image[2 * p + 1];
      ci[2 * p] = sr * xr - si * xi;
      ci[2 * p + 1] = sr * xi + si * xr;
    }
    const Tensor k = centered_dft2(ci, false);
    for (std::size_t p = 0; p < h * w; ++p) {
      y[(c * h * w + p) * 2] = m[p] * k[2 * p];
      y[(c * h * w + p) * 2 + 1] = m[p] * k[2 * p + 1];
    }
  }
  return y;
}

Tensor adjoint_op(const Tensor& kspace, const ImagingOperator& op) {
  require_kspace(kspace, op, "adjoint_op");
  const std::size_t h = op.height(), w = op.width(), nc = op.coils().ncoils();
  const Tensor& m = op.mask().bits;
  const Tensor& s = op.coils().sens;
  Tensor x({h, w, 2});
  x.set_complex(true);
  for (std::size_t c = 0; c < nc; ++c) {
    Tensor kc({h, w, 2});
    for (std::size_t p = 0; p < h * w; ++p) {
      kc[2 * p] = m[p] * kspace[(c * h * w + p) * 2];
      kc[2 * p + 1] = m[p] * kspace[(c * h * w + p) * 2 + 1];
    }
    const Tensor ic = centered_dft2(kc, true);
    for (std::size_t p = 0; p < h * w; ++p) {
      const double sr = s[(c * h * w + p) * 2], si = s[(c * h * w + p) * 2 + 1];
      x[2 * p] += sr * ic[2 * p] + si * ic[2 * p + 1];
      x[2 * p + 1] += sr * ic[2 * p + 1] - si * ic[2 * p];
    }
  }
  return x;
}

double dc_residual(const Tensor& image, const Tensor& kspace, const ImagingOperator& op) {
  require_kspace(kspace, op, "dc_residual");
  const Tensor ax = forward_op(image, op);
  const Tensor& m = op.mask().bits;
  const std::size_t hw = op.height() * op.width();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ax.size(); ++i) {
    const double mk = m[(i / 2) % hw];
    const double d = mk * (ax[i] - kspace[i]);
    num += d * d;
    den += kspace[i] * kspace[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

Tensor magnitude(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 2) throw ShapeError("magnitude: expected [H,W,2]");
  Tensor out({image.dim(0), image.dim(1)});
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = std::hypot(image[2 * p], image[2 * p + 1]);
  return out;
}

double psnr(const Tensor& ref, const Tensor& test) {
  require_same_dims(ref, test, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) se += (ref[i] - test[i]) * (ref[i] - test[i]);
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(ref.size()) / se);
}

double ssim(const Tensor& ref, const Tensor& test) {
  require_same_dims(ref, test, "ssim");
  if (ref.rank() != 2) throw ShapeError("ssim: expected [H,W] magnitude images");
  const std::size_t h = ref.dim(0), w = ref.dim(1), k = kSsimWindow;
  if (h < k || w < k) throw ConfigError("ssim: image smaller than the 7x7 window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const double n = static_cast<double>(k * k);
  double total = 0.0;
  for (std::size_t y = 0; y + k <= h; ++y) {
    for (std::size_t x = 0; x + k <= w; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double a = ref.at(y + dy, x + dx), b = test.at(y + dy, x + dx);
          sa += a;
          sb += b;
          saa += a * a;
          sbb += b * b;
          sab += a * b;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = std::max(saa / n - ma * ma, 0.0), vb = std::max(sbb / n - mb * mb, 0.0);
      const double cov = sab / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / static_cast<double>((h - k + 1) * (w - k + 1));
}

}  // namespace fedprior::imaging
