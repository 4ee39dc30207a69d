#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedprior/numerics/tensor.hpp"

/// Synthetic multi-site phantom cohorts.
namespace fedprior::data {

/// Generation parameters for one simulated site.
struct SiteSpec {
  std::size_t index = 0;
  std::size_t min_ellipses = 3;
  std::size_t max_ellipses = 5;
  double base_intensity = 0.5;  // target mean magnitude over the object support
  double texture_freq = 3.0;    // cycles across the field of view
  int polarity = 1;             // sign of the inner-structure contrast
  std::uint64_t seed = 0;
};

/// The three default sites: bases 0.3 / 0.5 / 0.7 with distinct texture,
/// contrast and structure counts.
std::vector<SiteSpec> default_sites(std::uint64_t master_seed);

/// Phantom `index` of a site as a complex [H, W, 2] image with magnitude in [0, 1].
Tensor gen_phantom(const SiteSpec& spec, std::size_t index, std::size_t h, std::size_t w);
std::vector<Tensor> gen_site_phantoms(const SiteSpec& spec, std::size_t n, std::size_t h, std::size_t w);

/// Site-agnostic phantoms whose parameters are drawn per image over the
/// union of the site ranges; used to pre-train the codec.
std::vector<Tensor> gen_aux_phantoms(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed);

/// Boolean object support of a phantom (pixels mostly inside the outer ellipse).
Tensor phantom_support(const SiteSpec& spec, std::size_t index, std::size_t h, std::size_t w);

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Seeded permutation partition. Sizes use largest-remainder rounding of
/// n * fraction. Throws ConfigError unless the fractions sum to 1.
Split make_split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed);

/// Per-image descriptor: mean, std, gradient energy, 5-bin histogram.
inline constexpr std::size_t kFeatureDim = 8;
std::array<double, kFeatureDim> image_features(const Tensor& magnitude);

/// Symmetrised Frechet distance between Gaussian fits of the feature vectors
/// of two sets of complex images.
double dist_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

/// Distances between size-`m` resamples (with replacement) of `a` and `b`.
std::vector<double> bootstrap_distances(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                                        std::size_t m, std::size_t rounds, std::uint64_t seed);

/// On-disk cohort: <root>/site_<k>/{train,val,test}/img_<i>.fvt and manifest.json.
struct DatasetLayout {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_train = 128;
  std::size_t n_val = 16;
  std::size_t n_test = 32;
};

struct SiteData {
  std::vector<Tensor> train, val, test;
};

SiteData generate_site(const SiteSpec& spec, const DatasetLayout& layout, std::uint64_t split_seed);
void write_dataset(const std::filesystem::path& root, const std::vector<SiteSpec>& sites,
                   const DatasetLayout& layout, std::uint64_t split_seed, const std::string& extra_manifest_json);
std::vector<Tensor> load_split(const std::filesystem::path& root, std::size_t site, const std::string& split);
SiteData load_site(const std::filesystem::path& root, std::size_t site);

/// Mean magnitude over pixels of a set of complex images.
double mean_magnitude(const std::vector<Tensor>& images);

}  // namespace fedprior::data
