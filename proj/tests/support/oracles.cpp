#include "oracles.hpp"

#include <cmath>
#include <limits>
#include <algorithm>
#include <numbers>

#include "fedprior/numerics/rng.hpp"

namespace fedprior::testing {

Tensor brute_force_dft2(const Tensor& x, bool inverse) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  const double sign = inverse ? 1.0 : -1.0;
  Tensor out({h, w, 2});
  for (std::size_t ky = 0; ky < h; ++ky) {
    for (std::size_t kx = 0; kx < w; ++kx) {
      double re = 0.0, im = 0.0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double fy = (static_cast<double>(ky) - static_cast<double>(h / 2)) *
                            (static_cast<double>(y) - static_cast<double>(h / 2)) / static_cast<double>(h);
          const double fx = (static_cast<double>(kx) - static_cast<double>(w / 2)) *
                            (static_cast<double>(xx) - static_cast<double>(w / 2)) / static_cast<double>(w);
          const double ang = sign * 2.0 * std::numbers::pi * (fy + fx);
          const double a = x.at(y, xx, 0), b = x.at(y, xx, 1);
          re += a * std::cos(ang) - b * std::sin(ang);
          im += a * std::sin(ang) + b * std::cos(ang);
        }
      }
      const double norm = 1.0 / std::sqrt(static_cast<double>(h * w));
      out.at(ky, kx, 0) = re * norm;
      out.at(ky, kx, 1) = im * norm;
    }
  }
  return out;
}

std::vector<std::uint32_t> brute_force_nearest(const Tensor& vectors, const Tensor& codebook) {
  const std::size_t n = vectors.dim(0), c = vectors.dim(1), v = codebook.dim(0);
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < v; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double diff = codebook.at(k, j) - vectors.at(i, j);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        out[i] = static_cast<std::uint32_t>(k);
      }
    }
  }
  return out;
}

Tensor random_complex(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({h, w, 2});
  for (auto& v : t.values()) v = rng.normal();
  t.set_complex(true);
  return t;
}

ParamSet with_identity_projection(const ParamSet& params, const Tensor& codebook) {
  ParamSet p = params;
  const std::size_t c = codebook.dim(1);
  Tensor w({9 * c, c});
  for (std::size_t i = 0; i < c; ++i) w.at(4 * c + i, i) = 1.0;
  p.set("proj/w", w);
  p.set("proj/b", Tensor({c}));
  p.set("codebook", codebook);
  return p;
}

Tensor exact_codebook(const vq::Codec& codec, const Tensor& image) {
  const auto& cfg = codec.config();
  const std::size_t side = cfg.latent_side(), c = cfg.latent_channels;
  Tensor cb({cfg.vocab, c});
  for (std::size_t k = 0; k < cfg.vocab; ++k) {
    for (std::size_t j = 0; j < c; ++j) cb.at(k, j) = 1e6 * static_cast<double>(k + 1);
  }
  // Residual loop with plain averaging / bilinear interpolation, written out
  // directly rather than through the codec.
  Tensor r = codec.encode_latent(image);
  std::size_t row = 0;
  for (std::size_t p : cfg.schedule) {
    const std::size_t f = side / p;
    Tensor d({p * p, c});
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        for (std::size_t j = 0; j < c; ++j) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < f; ++dy) {
            for (std::size_t dx = 0; dx < f; ++dx) s += r.at(y * f + dy, x * f + dx, j);
          }
          d.at(y * p + x, j) = s / static_cast<double>(f * f);
        }
      }
    }
    for (std::size_t i = 0; i < p * p; ++i, ++row) {
      for (std::size_t j = 0; j < c; ++j) cb.at(row, j) = d.at(i, j);
    }
    for (std::size_t y = 0; y < side; ++y) {
      const double sy = std::clamp((static_cast<double>(y) + 0.5) / static_cast<double>(f) - 0.5, 0.0, static_cast<double>(p - 1));
      const auto y0 = static_cast<std::size_t>(sy);
      const std::size_t y1 = std::min(y0 + 1, p - 1);
      const double ty = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < side; ++x) {
        const double sx = std::clamp((static_cast<double>(x) + 0.5) / static_cast<double>(f) - 0.5, 0.0, static_cast<double>(p - 1));
        const auto x0 = static_cast<std::size_t>(sx);
        const std::size_t x1 = std::min(x0 + 1, p - 1);
        const double tx = sx - static_cast<double>(x0);
        for (std::size_t j = 0; j < c; ++j) {
          const double v = (1 - ty) * ((1 - tx) * d.at(y0 * p + x0, j) + tx * d.at(y0 * p + x1, j)) +
                           ty * ((1 - tx) * d.at(y1 * p + x0, j) + tx * d.at(y1 * p + x1, j));
          r.at(y, x, j) -= v;
        }
      }
    }
  }
  return cb;
}

}  // namespace fedprior::testing
