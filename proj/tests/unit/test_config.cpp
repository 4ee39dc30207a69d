#include <gtest/gtest.h>

#include <set>

#include "fedprior/config.hpp"
#include "fedprior/errors.hpp"

namespace fedprior::config {
namespace {

const char* kMinimal =
    "[run]\n[sites]\n[codec]\n[prior]\n[federation]\n[recon.site_0]\n[recon.site_1]\n[recon.site_2]\n[eval]\n";

std::string with(const std::string& section, const std::string& line) {
  std::string s = kMinimal;
  const auto at = s.find("[" + section + "]\n");
  EXPECT_NE(at, std::string::npos);
  s.insert(at + section.size() + 3, line + "\n");
  return s;
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, EmptySectionsGiveDefaults) {
  const auto c = parse_config(kMinimal);
  EXPECT_EQ(to_ini(c), to_ini(default_config()));
  EXPECT_EQ(config_hash(c), config_hash(default_config()));
  EXPECT_EQ(c.recon[0].arch.family, recon::Family::cascade_dc);
  EXPECT_EQ(c.recon[0].arch.cascades, 3u);
  EXPECT_EQ(c.recon[1].arch.family, recon::Family::conv_autoencoder);
  EXPECT_EQ(c.recon[2].arch.family, recon::Family::unrolled);
  EXPECT_EQ(c.recon[2].arch.cascades, 5u);
  EXPECT_EQ(c.sites.layout.n_train, 128u);
  EXPECT_EQ(c.federation.rounds, 50u);
  EXPECT_EQ(c.prior.model.vocab, c.codec.model.vocab);
  EXPECT_EQ(c.prior.model.sites, 3u);
}

TEST(Config, CanonicalTextRoundTrips) {
  auto c = parse_config(with("recon.site_1", "family = unrolled\ncascades = 2\nlr = 0.0025"));
  c.federation.weights = {0.5, 0.25, 0.25};
  c.eval.accelerations = {2.5, 4};
  const auto text = to_ini(c);
  EXPECT_EQ(to_ini(parse_config(text)), text);
  EXPECT_NE(config_hash(c), config_hash(default_config()));
}

TEST(Config, ValuesOverrideDefaults) {
  const auto c = parse_config(with("codec", "vocab = 64\nschedule = 1, 2, 3, 5, 8"));
  EXPECT_EQ(c.codec.model.vocab, 64u);
  EXPECT_EQ(c.prior.model.vocab, 64u);
  EXPECT_EQ(c.prior.model.schedule, (std::vector<std::size_t>{1, 2, 3, 5, 8}));
  const auto d = parse_config(with("prior", "greedy = true\nkeep_fraction = 0.1"));
  EXPECT_TRUE(d.prior.sampling.greedy);
  EXPECT_DOUBLE_EQ(d.prior.sampling.keep_fraction, 0.1);
}

TEST(Config, MissingSectionIsNamed) {
  std::string s = kMinimal;
  s.erase(s.find("[prior]\n"), 8);
  EXPECT_NE(error_of(s).find("[prior]"), std::string::npos);
  s = kMinimal;
  s.erase(s.find("[recon.site_2]\n"), 15);
  EXPECT_NE(error_of(s).find("[recon.site_2]"), std::string::npos);
}

TEST(Config, UnknownKeysAndSectionsRejected) {
  EXPECT_NE(error_of(with("codec", "vocabulary = 64")).find("vocabulary"), std::string::npos);
  EXPECT_NE(error_of(std::string(kMinimal) + "[extra]\nx = 1\n").find("[extra]"), std::string::npos);
  EXPECT_NE(error_of(std::string(kMinimal) + "[recon.site_3]\n").find("recon.site_3"), std::string::npos);
}

TEST(Config, MalformedValuesRejected) {
  EXPECT_THROW(parse_config(with("federation", "rounds = ten")), ConfigError);
  EXPECT_THROW(parse_config(with("federation", "rounds = 0")), ConfigError);
  EXPECT_THROW(parse_config(with("federation", "rounds = -3")), ConfigError);
  EXPECT_THROW(parse_config(with("federation", "weights = 1, 2")), ConfigError);
  EXPECT_THROW(parse_config(with("recon.site_0", "family = resnet")), ConfigError);
  EXPECT_THROW(parse_config(with("eval", "accelerations =")), ConfigError);
  EXPECT_THROW(parse_config(with("prior", "greedy = maybe")), ConfigError);
  EXPECT_THROW(parse_config(with("sites", "base_intensity = 0.2, 0.4")), ConfigError);
  EXPECT_THROW(parse_config(with("sites", "polarity = 1, 0, 1")), ConfigError);
  EXPECT_THROW(parse_config(with("run", "threads = 0")), ConfigError);
  EXPECT_THROW(parse_config("[sites\n"), ConfigError);
  EXPECT_THROW(parse_config(with("codec", "vocab = 8\nvocab = 9")), ConfigError);
}

TEST(Config, MoreThanThreeSitesNeedExplicitCohorts) {
  std::string s = "[sites]\ncount = 4\n[codec]\n[prior]\n[federation]\n[eval]\n";
  for (int k = 0; k < 4; ++k) s += "[recon.site_" + std::to_string(k) + "]\n";
  EXPECT_THROW(parse_config(s), ConfigError);
  s.insert(s.find("[codec]"),
           "base_intensity = 0.2,0.4,0.6,0.8\ntexture_freq = 1,2,3,4\npolarity = 1,-1,1,-1\n"
           "min_ellipses = 2,2,2,2\nmax_ellipses = 3,3,3,4\n");
  const auto c = parse_config(s);
  const auto specs = site_specs(c);
  ASSERT_EQ(specs.size(), 4u);
  EXPECT_DOUBLE_EQ(specs[3].base_intensity, 0.8);
  EXPECT_EQ(specs[3].max_ellipses, 4u);
  EXPECT_EQ(c.recon[3].arch.family, recon::Family::cascade_dc);
}

TEST(Config, SiteSpecsFollowDefaults) {
  const auto c = default_config();
  const auto a = site_specs(c), b = data::default_sites(c.master_seed);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].seed, b[k].seed);
    EXPECT_EQ(a[k].base_intensity, b[k].base_intensity);
  }
}

TEST(Config, SeedOverride) {
  auto c = default_config();
  apply_seed_override(c, nullptr);
  EXPECT_EQ(c.master_seed, 7u);
  apply_seed_override(c, "12345");
  EXPECT_EQ(c.master_seed, 12345u);
  EXPECT_NE(config_hash(c), config_hash(default_config()));
  EXPECT_THROW(apply_seed_override(c, "12a"), ConfigError);
}

TEST(Config, DerivedSeedsAreDistinct) {
  const auto s = derive_seeds(7);
  std::set<std::uint64_t> all{s.split, s.aux_images, s.codec, s.prior_init, s.federation};
  for (std::size_t k = 0; k < 3; ++k) {
    all.insert({s.recon_init(k), s.recon_pretrain(k), s.recon_finetune(k), s.operators(k), s.train_stream(k),
                s.eval_stream(k, 4.0), s.eval_stream(k, 8.0)});
    for (std::size_t j = 0; j < 3; ++j) {
      if (j != k) all.insert(s.synth(k, j));
    }
  }
  EXPECT_EQ(all.size(), 5u + 3u * 7u + 6u);
  EXPECT_NE(seeds_json(s, 3).find("\"federation\""), std::string::npos);
}

}  // namespace
}  // namespace fedprior::config
