#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "fedprior/datasets.hpp"
#include "fedprior/errors.hpp"
#include "fedprior/imaging.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::data {
namespace {

double support_mean(const SiteSpec& spec, std::size_t n) {
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor m = imaging::magnitude(gen_phantom(spec, i, 32, 32));
    const Tensor sup = phantom_support(spec, i, 32, 32);
    for (std::size_t p = 0; p < m.size(); ++p) {
      if (sup[p] > 0.0) {
        s += m[p];
        ++count;
      }
    }
  }
  return s / static_cast<double>(count);
}

TEST(Phantoms, DeterministicPerSeedAndIndex) {
  const auto sites = default_sites(11);
  EXPECT_TRUE(bit_equal(gen_phantom(sites[1], 4, 32, 32), gen_phantom(sites[1], 4, 32, 32)));
  EXPECT_FALSE(bit_equal(gen_phantom(sites[1], 4, 32, 32), gen_phantom(sites[1], 5, 32, 32)));
}

TEST(Phantoms, MagnitudeInUnitRangeAndComplex) {
  for (const auto& spec : default_sites(3)) {
    for (const auto& img : gen_site_phantoms(spec, 20, 32, 32)) {
      ASSERT_TRUE(img.is_complex());
      ASSERT_EQ(img.dims(), (Shape{32, 32, 2}));
      const Tensor mag = imaging::magnitude(img);
      for (double v : mag.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(Phantoms, SupportMeanMatchesBaseIntensity) {
  for (const auto& spec : default_sites(5)) EXPECT_NEAR(support_mean(spec, 100), spec.base_intensity, 0.05);
}

TEST(Phantoms, PhaseIsNonTrivial) {
  const Tensor img = gen_phantom(default_sites(1)[0], 0, 32, 32);
  double im = 0.0;
  for (std::size_t p = 0; p < 1024; ++p) im += std::abs(img[2 * p + 1]);
  EXPECT_GT(im, 0.0);
}

TEST(Phantoms, InvalidSpecRejected) {
  SiteSpec s;
  s.base_intensity = 1.0;
  EXPECT_THROW(gen_phantom(s, 0, 32, 32), ConfigError);
  EXPECT_THROW(gen_site_phantoms(SiteSpec{}, 0, 32, 32), ConfigError);
}

TEST(Phantoms, SitesDifferPairwise) {
  const auto s = default_sites(0);
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t b = a + 1; b < s.size(); ++b) EXPECT_NE(s[a].base_intensity, s[b].base_intensity);
  }
}

TEST(Split, SmallExampleSizes) {
  const Split s = make_split(10, {0.8, 0.1, 0.1}, 3);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split, DisjointCoverAndDeterministic) {
  const Split s = make_split(176, {128.0 / 176, 16.0 / 176, 32.0 / 176}, 9);
  EXPECT_EQ(s.train.size(), 128u);
  EXPECT_EQ(s.val.size(), 16u);
  EXPECT_EQ(s.test.size(), 32u);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 176u);
  EXPECT_EQ(*all.rbegin(), 175u);
  const Split t = make_split(176, {128.0 / 176, 16.0 / 176, 32.0 / 176}, 9);
  EXPECT_EQ(s.train, t.train);
  EXPECT_EQ(s.test, t.test);
  EXPECT_NE(make_split(176, {0.5, 0.25, 0.25}, 10).train, make_split(176, {0.5, 0.25, 0.25}, 9).train);
}

TEST(Split, FractionsMustSumToOne) { EXPECT_THROW(make_split(10, {0.8, 0.1, 0.2}, 0), ConfigError); }

TEST(Features, ClosedFormOnConstantImage) {
  const auto f = image_features(Tensor({8, 8}, 0.5));
  EXPECT_DOUBLE_EQ(f[0], 0.5);
  EXPECT_DOUBLE_EQ(f[1], 0.0);
  EXPECT_DOUBLE_EQ(f[2], 0.0);
  EXPECT_DOUBLE_EQ(f[5], 1.0);
}

TEST(Distance, SelfDistanceZeroAndSymmetric) {
  const auto sites = default_sites(2);
  const auto a = gen_site_phantoms(sites[0], 40, 32, 32);
  const auto b = gen_site_phantoms(sites[2], 40, 32, 32);
  EXPECT_NEAR(dist_distance(a, a), 0.0, 1e-8);
  EXPECT_EQ(dist_distance(a, b), dist_distance(b, a));
  EXPECT_GT(dist_distance(a, b), 0.0);
}

TEST(Distance, InterSiteExceedsIntraSiteBootstrap) {
  const auto sites = default_sites(4);
  const auto a = gen_site_phantoms(sites[0], 60, 32, 32);
  const auto b = gen_site_phantoms(sites[1], 60, 32, 32);
  auto intra = bootstrap_distances(a, a, 60, 30, 1);
  EXPECT_GT(dist_distance(a, b), *std::max_element(intra.begin(), intra.end()));
}

TEST(Layout, WriteReloadBitIdenticalAndIdempotent) {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "fedprior_ds_test";
  fs::remove_all(root);
  DatasetLayout layout{16, 16, 4, 1, 2};
  const auto sites = default_sites(8);
  write_dataset(root, sites, layout, 77, "");
  std::size_t files = 0;
  for (auto& e : fs::recursive_directory_iterator(root / "site_1")) files += e.is_regular_file();
  EXPECT_EQ(files, 7u);
  const SiteData direct = generate_site(sites[2], layout, 77);
  const SiteData loaded = load_site(root, 2);
  ASSERT_EQ(loaded.train.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(bit_equal(direct.train[i], loaded.train[i]));
  const auto before = persist::read_file(root / "site_0" / "test" / "img_1.fvt");
  const auto manifest = persist::read_file(root / "manifest.json");
  write_dataset(root, sites, layout, 77, "");
  EXPECT_EQ(before, persist::read_file(root / "site_0" / "test" / "img_1.fvt"));
  EXPECT_EQ(manifest, persist::read_file(root / "manifest.json"));
  EXPECT_THROW(load_split(root, 5, "train"), IoError);
}

TEST(AuxPhantoms, DeterministicAndVaried) {
  const auto a = gen_aux_phantoms(6, 32, 32, 1);
  const auto b = gen_aux_phantoms(6, 32, 32, 1);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_TRUE(bit_equal(a[i], b[i]));
  EXPECT_FALSE(bit_equal(a[0], a[1]));
}

}  // namespace
}  // namespace fedprior::data
