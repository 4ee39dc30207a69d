#include "fedprior/datasets.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>

#include "fedprior/errors.hpp"
#include "fedprior/imaging.hpp"
#include "fedprior/numerics/rng.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::data {
namespace {

constexpr std::size_t kSuper = 4;

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t, value;

  bool contains(double u, double v) const {
    const double du = u - cx, dv = v - cy;
    const double p = (du * cos_t + dv * sin_t) / a;
    const double q = (-du * sin_t + dv * cos_t) / b;
    return p * p + q * q <= 1.0;
  }
};

Ellipse make_ellipse(double cx, double cy, double a, double b, double theta, double value) {
  return {cx, cy, a, b, std::cos(theta), std::sin(theta), value};
}

struct PhantomPlan {
  Ellipse head;
  std::vector<Ellipse> inner;
  double tex_freq, tex_cos, tex_sin, tex_phase, tex_depth;
  double p0, pu, pv, puv;
};

PhantomPlan plan_phantom(const SiteSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, {index}));
  PhantomPlan plan;
  plan.head = make_ellipse(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.70, 0.85),
                           rng.uniform(0.80, 0.92), rng.uniform(-0.2, 0.2), 1.0);
  const std::size_t count = spec.min_ellipses + rng.below(spec.max_ellipses - spec.min_ellipses + 1);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = 0.5 * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double a = rng.uniform(0.08, 0.35), b = rng.uniform(0.08, 0.35);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double amp = static_cast<double>(spec.polarity) * rng.uniform(0.15, 0.4);
    plan.inner.push_back(make_ellipse(plan.head.cx + r * std::cos(phi), plan.head.cy + r * std::sin(phi), a, b, theta, amp));
  }
  const double dir = rng.uniform(0.0, std::numbers::pi);
  plan.tex_freq = spec.texture_freq;
  plan.tex_cos = std::cos(dir);
  plan.tex_sin = std::sin(dir);
  plan.tex_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  plan.tex_depth = 0.12;
  plan.p0 = rng.uniform(-0.5, 0.5);
  plan.pu = rng.uniform(-0.3, 0.3);
  plan.pv = rng.uniform(-0.3, 0.3);
  plan.puv = rng.uniform(-0.2, 0.2);
  return plan;
}

// Supersampled raw magnitude and head coverage fraction per pixel.
void rasterize(const PhantomPlan& plan, std::size_t h, std::size_t w, std::vector<double>& mag, std::vector<double>& cover) {
  mag.assign(h * w, 0.0);
  cover.assign(h * w, 0.0);
  const double inv = 1.0 / static_cast<double>(kSuper * kSuper);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0, cov = 0.0;
      for (std::size_t sy = 0; sy < kSuper; ++sy) {
        for (std::size_t sx = 0; sx < kSuper; ++sx) {
          const double v = 2.0 * (static_cast<double>(y) + (static_cast<double>(sy) + 0.5) / kSuper) / static_cast<double>(h) - 1.0;
          const double u = 2.0 * (static_cast<double>(x) + (static_cast<double>(sx) + 0.5) / kSuper) / static_cast<double>(w) - 1.0;
          if (!plan.head.contains(u, v)) continue;
          double val = plan.head.value;
          for (const auto& e : plan.inner) {
            if (e.contains(u, v)) val += e.value;
          }
          const double t = u * plan.tex_cos + v * plan.tex_sin;
          val *= 1.0 + plan.tex_depth * std::sin(std::numbers::pi * plan.tex_freq * t + plan.tex_phase);
          acc += std::max(val, 0.0);
          cov += 1.0;
        }
      }
      mag[y * w + x] = acc * inv;
      cover[y * w + x] = cov * inv;
    }
  }
}

Tensor compose(const PhantomPlan& plan, double base, std::size_t h, std::size_t w) {
  std::vector<double> mag, cover;
  rasterize(plan, h, w, mag, cover);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mag.size(); ++i) {
    if (cover[i] > 0.5) {
      sum += mag[i];
      ++n;
    }
  }
  const double gain = (n > 0 && sum > 0.0) ? base * static_cast<double>(n) / sum : 0.0;
  Tensor out({h, w, 2});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
      const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
      const double m = std::clamp(mag[y * w + x] * gain, 0.0, 1.0);
      const double ph = plan.p0 + plan.pu * u + plan.pv * v + plan.puv * u * v;
      out.at(y, x, 0) = m * std::cos(ph);
      out.at(y, x, 1) = m * std::sin(ph);
    }
  }
  out.set_complex(true);
  return out;
}

using Vec = Eigen::Matrix<double, kFeatureDim, 1>;
using Mat = Eigen::Matrix<double, kFeatureDim, kFeatureDim>;

void fit_gaussian(const std::vector<Tensor>& images, Vec& mu, Mat& cov) {
  if (images.empty()) throw ContractError("dist_distance needs nonempty sets");
  std::vector<Vec> feats;
  feats.reserve(images.size());
  for (const auto& img : images) {
    const auto f = image_features(imaging::magnitude(img));
    feats.emplace_back(Eigen::Map<const Vec>(f.data()));
  }
  mu.setZero();
  for (const auto& f : feats) mu += f;
  mu /= static_cast<double>(feats.size());
  cov.setZero();
  for (const auto& f : feats) cov += (f - mu) * (f - mu).transpose();
  if (feats.size() > 1) cov /= static_cast<double>(feats.size() - 1);
  cov += 1e-8 * Mat::Identity();
}

Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  const Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet(const Vec& mu_a, const Mat& ca, const Vec& mu_b, const Mat& cb) {
  // tr((Ca Cb)^1/2) == tr((Ca^1/2 Cb Ca^1/2)^1/2), the latter being symmetric PSD.
  const Mat sa = psd_sqrt(ca);
  const Mat cross = psd_sqrt(sa * cb * sa);
  return (mu_a - mu_b).squaredNorm() + (ca + cb - 2.0 * cross).trace();
}

}  // namespace

std::vector<SiteSpec> default_sites(std::uint64_t master_seed) {
  std::vector<SiteSpec> s(3);
  s[0] = {0, 3, 5, 0.3, 2.0, 1, 0};
  s[1] = {1, 5, 8, 0.5, 4.0, -1, 0};
  s[2] = {2, 2, 4, 0.7, 6.0, -1, 0};
  for (auto& spec : s) spec.seed = derive_seed(master_seed, {0x5173ULL, spec.index});
  return s;
}

Tensor gen_phantom(const SiteSpec& spec, std::size_t index, std::size_t h, std::size_t w) {
  if (spec.max_ellipses < spec.min_ellipses) throw ConfigError("ellipse range is empty");
  if (!(spec.base_intensity > 0.0 && spec.base_intensity < 1.0)) throw ConfigError("base intensity must lie in (0,1)");
  return compose(plan_phantom(spec, index), spec.base_intensity, h, w);
}

Tensor phantom_support(const SiteSpec& spec, std::size_t index, std::size_t h, std::size_t w) {
  std::vector<double> mag, cover;
  rasterize(plan_phantom(spec, index), h, w, mag, cover);
  Tensor s({h, w});
  for (std::size_t i = 0; i < cover.size(); ++i) s[i] = cover[i] > 0.5 ? 1.0 : 0.0;
  return s;
}

std::vector<Tensor> gen_site_phantoms(const SiteSpec& spec, std::size_t n, std::size_t h, std::size_t w) {
  if (n == 0) throw ConfigError("phantom count must be at least 1");
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_phantom(spec, i, h, w));
  return out;
}

std::vector<Tensor> gen_aux_phantoms(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {0xA0C5ULL, i}));
    SiteSpec spec;
    spec.index = i;
    spec.min_ellipses = 2 + rng.below(4);
    spec.max_ellipses = spec.min_ellipses + rng.below(4);
    spec.base_intensity = rng.uniform(0.25, 0.75);
    spec.texture_freq = rng.uniform(1.5, 6.5);
    spec.polarity = rng.below(2) ? 1 : -1;
    spec.seed = rng.next_u64();
    out.push_back(gen_phantom(spec, 0, h, w));
  }
  return out;
}

Split make_split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  while (used < n) {
    const auto best = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++sizes[best];
    rem[best] = -1.0;
    ++used;
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<long>(sizes[0]));
  s.val.assign(perm.begin() + static_cast<long>(sizes[0]), perm.begin() + static_cast<long>(sizes[0] + sizes[1]));
  s.test.assign(perm.begin() + static_cast<long>(sizes[0] + sizes[1]), perm.end());
  return s;
}

std::array<double, kFeatureDim> image_features(const Tensor& m) {
  const std::size_t h = m.dim(0), w = m.dim(1), n = h * w;
  std::array<double, kFeatureDim> f{};
  double mean = 0.0;
  for (double v : m.values()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : m.values()) var += (v - mean) * (v - mean);
  f[0] = mean;
  f[1] = std::sqrt(var / static_cast<double>(n));
  double g = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (x + 1 < w) g += std::pow(m.at(y, x + 1) - m.at(y, x), 2);
      if (y + 1 < h) g += std::pow(m.at(y + 1, x) - m.at(y, x), 2);
    }
  }
  f[2] = g / static_cast<double>(n);
  for (double v : m.values()) {
    const auto bin = static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * 5.0);
    f[3 + std::min<std::size_t>(bin, 4)] += 1.0 / static_cast<double>(n);
  }
  return f;
}

double dist_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  Vec ma, mb;
  Mat ca, cb;
  fit_gaussian(a, ma, ca);
  fit_gaussian(b, mb, cb);
  const double d = 0.5 * (frechet(ma, ca, mb, cb) + frechet(mb, cb, ma, ca));
  return std::max(d, 0.0);
}

std::vector<double> bootstrap_distances(const std::vector<Tensor>& a, const std::vector<Tensor>& b, std::size_t m,
                                        std::size_t rounds, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out;
  out.reserve(rounds);
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<Tensor> sa, sb;
    for (std::size_t i = 0; i < m; ++i) sa.push_back(a[rng.below(a.size())]);
    for (std::size_t i = 0; i < m; ++i) sb.push_back(b[rng.below(b.size())]);
    out.push_back(dist_distance(sa, sb));
  }
  return out;
}

SiteData generate_site(const SiteSpec& spec, const DatasetLayout& layout, std::uint64_t split_seed) {
  const std::size_t n = layout.n_train + layout.n_val + layout.n_test;
  const double dn = static_cast<double>(n);
  const Split split = make_split(n,
                                 {static_cast<double>(layout.n_train) / dn, static_cast<double>(layout.n_val) / dn,
                                  static_cast<double>(layout.n_test) / dn},
                                 derive_seed(split_seed, {spec.index}));
  SiteData d;
  for (std::size_t i : split.train) d.train.push_back(gen_phantom(spec, i, layout.height, layout.width));
  for (std::size_t i : split.val) d.val.push_back(gen_phantom(spec, i, layout.height, layout.width));
  for (std::size_t i : split.test) d.test.push_back(gen_phantom(spec, i, layout.height, layout.width));
  return d;
}

void write_dataset(const std::filesystem::path& root, const std::vector<SiteSpec>& sites, const DatasetLayout& layout,
                   std::uint64_t split_seed, const std::string& extra_manifest_json) {
  nlohmann::json manifest;
  manifest["height"] = layout.height;
  manifest["width"] = layout.width;
  manifest["split_seed"] = split_seed;
  manifest["counts"] = {{"train", layout.n_train}, {"val", layout.n_val}, {"test", layout.n_test}};
  for (const auto& spec : sites) {
    const SiteData d = generate_site(spec, layout, split_seed);
    const auto dir = root / ("site_" + std::to_string(spec.index));
    const std::pair<const char*, const std::vector<Tensor>*> parts[] = {{"train", &d.train}, {"val", &d.val}, {"test", &d.test}};
    for (const auto& [name, images] : parts) {
      for (std::size_t i = 0; i < images->size(); ++i) {
        persist::save_tensor((*images)[i], dir / name / ("img_" + std::to_string(i) + ".fvt"));
      }
    }
    manifest["sites"].push_back({{"index", spec.index},
                                 {"min_ellipses", spec.min_ellipses},
                                 {"max_ellipses", spec.max_ellipses},
                                 {"base_intensity", spec.base_intensity},
                                 {"texture_freq", spec.texture_freq},
                                 {"polarity", spec.polarity},
                                 {"seed", spec.seed}});
  }
  if (!extra_manifest_json.empty()) manifest["run"] = nlohmann::json::parse(extra_manifest_json);
  persist::write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<Tensor> load_split(const std::filesystem::path& root, std::size_t site, const std::string& split) {
  const auto dir = root / ("site_" + std::to_string(site)) / split;
  if (!std::filesystem::is_directory(dir)) throw IoError("missing dataset directory " + dir.string());
  std::vector<Tensor> out;
  for (std::size_t i = 0;; ++i) {
    const auto p = dir / ("img_" + std::to_string(i) + ".fvt");
    if (!std::filesystem::exists(p)) break;
    out.push_back(persist::load_tensor(p));
  }
  if (out.empty()) throw IoError("no images in " + dir.string());
  return out;
}

SiteData load_site(const std::filesystem::path& root, std::size_t site) {
  return {load_split(root, site, "train"), load_split(root, site, "val"), load_split(root, site, "test")};
}

double mean_magnitude(const std::vector<Tensor>& images) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& img : images) {
    const Tensor m = imaging::magnitude(img);
    for (double v : m.values()) s += v;
    n += m.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace fedprior::data
