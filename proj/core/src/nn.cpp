#include "fedprior/nn.hpp"

#include <algorithm>
#include <cmath>

#include "fedprior/errors.hpp"

namespace fedprior::nn {

using ad::RowMap;
using ad::Var;

Bound::Bound(ad::Tape& tape, const ParamSet& params, bool trainable) : tape_(&tape) {
  if (trainable) {
    vars_ = tape.leaves(params);
  } else {
    for (const auto& [path, t] : params) vars_.emplace(path, tape.constant(t));
  }
}

Var Bound::operator[](const std::string& path) const {
  const auto it = vars_.find(path);
  if (it == vars_.end()) throw IndexError("missing parameter " + path);
  return it->second;
}

void add_conv(ParamSet& p, const std::string& path, std::size_t cin, std::size_t cout, Rng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(9 * cin));
  Tensor w({9 * cin, cout});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  p.add(path + "/w", std::move(w));
  p.add(path + "/b", Tensor({cout}));
}

void add_linear(ParamSet& p, const std::string& path, std::size_t in, std::size_t out, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  Tensor w({in, out});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  p.add(path + "/w", std::move(w));
  p.add(path + "/b", Tensor({out}));
}

void add_resblock(ParamSet& p, const std::string& path, std::size_t ch, Rng& rng, double gain2) {
  add_conv(p, path + "/c1", ch, ch, rng);
  add_conv(p, path + "/c2", ch, ch, rng, gain2);
}

Var conv(const Bound& p, const std::string& path, Var x, std::size_t stride) {
  return ad::conv3x3(x, p[path + "/w"], p[path + "/b"], stride);
}

Var linear(const Bound& p, const std::string& path, Var x) {
  return ad::add_row(ad::matmul(x, p[path + "/w"]), p[path + "/b"]);
}

Var resblock(const Bound& p, const std::string& path, Var x) {
  const Var h = conv(p, path + "/c1", ad::gelu(x));
  return ad::add(x, conv(p, path + "/c2", ad::gelu(h)));
}

namespace {

// 1D weights: out[i] = sum_j w_ij in[j].
using Weights1D = std::vector<std::vector<std::pair<std::size_t, double>>>;

Weights1D area_1d(std::size_t nin, std::size_t nout) {
  Weights1D out(nout);
  const double scale = static_cast<double>(nin) / static_cast<double>(nout);
  for (std::size_t i = 0; i < nout; ++i) {
    const double lo = static_cast<double>(i) * scale, hi = static_cast<double>(i + 1) * scale;
    for (std::size_t j = static_cast<std::size_t>(std::floor(lo)); j < nin && static_cast<double>(j) < hi; ++j) {
      const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0.0) out[i].emplace_back(j, overlap / scale);
    }
  }
  return out;
}

Weights1D bilinear_1d(std::size_t nin, std::size_t nout) {
  Weights1D out(nout);
  for (std::size_t i = 0; i < nout; ++i) {
    double src = (static_cast<double>(i) + 0.5) * static_cast<double>(nin) / static_cast<double>(nout) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(nin - 1));
    const auto j0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t j1 = std::min(j0 + 1, nin - 1);
    const double t = src - static_cast<double>(j0);
    if (j1 == j0 || t == 0.0) {
      out[i].emplace_back(j0, 1.0);
    } else {
      out[i].emplace_back(j0, 1.0 - t);
      out[i].emplace_back(j1, t);
    }
  }
  return out;
}

RowMap separable(const Weights1D& wy, const Weights1D& wx, std::size_t hin, std::size_t win) {
  RowMap m;
  m.rows_in = hin * win;
  m.rows_out = wy.size() * wx.size();
  for (std::size_t oy = 0; oy < wy.size(); ++oy) {
    for (std::size_t ox = 0; ox < wx.size(); ++ox) {
      for (const auto& [iy, a] : wy[oy]) {
        for (const auto& [ix, b] : wx[ox]) {
          m.entries.push_back({static_cast<std::uint32_t>(oy * wx.size() + ox), static_cast<std::uint32_t>(iy * win + ix), a * b});
        }
      }
    }
  }
  return m;
}

}  // namespace

RowMap area_map(std::size_t hin, std::size_t win, std::size_t hout, std::size_t wout) {
  if (hout == 0 || wout == 0 || hout > hin || wout > win) throw ShapeError("area_map: output must be a nonempty downsampling");
  return separable(area_1d(hin, hout), area_1d(win, wout), hin, win);
}

RowMap bilinear_map(std::size_t hin, std::size_t win, std::size_t hout, std::size_t wout) {
  if (hin == 0 || win == 0 || hout == 0 || wout == 0) throw ShapeError("bilinear_map: empty grid");
  return separable(bilinear_1d(hin, hout), bilinear_1d(win, wout), hin, win);
}

Var resample(Var x, const RowMap& map, std::size_t hout, std::size_t wout) {
  const Shape& d = x.dims();
  if (d.size() != 3 || d[0] * d[1] != map.rows_in) throw ShapeError("resample: input grid does not match map");
  const std::size_t c = d[2];
  const Var rows = ad::reshape(x, {d[0] * d[1], c});
  return ad::reshape(ad::apply_row_map(rows, map), {hout, wout, c});
}

Tensor apply_map(const Tensor& x, const RowMap& map) {
  if (x.rank() != 2 || x.dim(0) != map.rows_in) throw ShapeError("apply_map: row count does not match map");
  const std::size_t c = x.dim(1);
  Tensor out({map.rows_out, c});
  for (const auto& e : map.entries) {
    const double* src = x.data() + static_cast<std::size_t>(e.in) * c;
    double* dst = out.data() + static_cast<std::size_t>(e.out) * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += e.weight * src[j];
  }
  return out;
}

}  // namespace fedprior::nn
