#include <gtest/gtest.h>

#include <atomic>
#include <fstream>

#include "fedprior/errors.hpp"
#include "fedprior/persistence.hpp"
#include "fedprior/pipeline.hpp"

namespace fedprior::pipeline {
namespace {

config::RunConfig tiny() {
  const std::string text =
      "[run]\nseed = 3\nthreads = 2\n"
      "[sites]\nheight = 16\nwidth = 16\ntrain = 4\nval = 1\ntest = 2\n"
      "[codec]\nwidths = 4,4,4\nlatent_channels = 4\nvocab = 8\nschedule = 1,2,4\nepochs = 1\nbatch = 4\naux_images = 4\n"
      "[prior]\nd_model = 16\nlayers = 1\nheads = 2\nbatch = 4\n"
      "[federation]\nrounds = 2\n"
      "[recon.site_0]\nwidth = 4\npretrain_epochs = 1\nfinetune_epochs = 2\nbatch = 4\ncascades = 1\n"
      "[recon.site_1]\nwidth = 4\npretrain_epochs = 1\nfinetune_epochs = 2\nbatch = 4\n"
      "[recon.site_2]\nwidth = 4\npretrain_epochs = 1\nfinetune_epochs = 2\nbatch = 4\ncascades = 1\n"
      "[eval]\naccelerations = 4,8\n";
  return config::parse_config(text);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("fedprior_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  const auto b = persist::read_file(p);
  return std::string(b.begin(), b.end());
}

/// Shared tiny prior, trained once.
const PriorOutcome& tiny_prior() {
  static const PriorOutcome out = [] {
    const auto cfg = tiny();
    const auto root = scratch("prior_data");
    gen_data(cfg, root);
    return train_prior(cfg, train_codec(cfg), load_train_sets(root, 3));
  }();
  return out;
}

TEST(ParallelFor, MatchesSerialAndPropagatesErrors) {
  std::vector<int> a(100), b(100);
  parallel_for(100, 1, [&](std::size_t i) { a[i] = static_cast<int>(i * i); });
  parallel_for(100, 4, [&](std::size_t i) { b[i] = static_cast<int>(i * i); });
  EXPECT_EQ(a, b);
  std::atomic<int> calls{0};
  EXPECT_THROW(parallel_for(20, 3,
                            [&](std::size_t i) {
                              ++calls;
                              if (i == 7) throw TrainingError("boom");
                            }),
               TrainingError);
  EXPECT_EQ(calls.load(), 20);
  parallel_for(0, 4, [](std::size_t) { FAIL(); });
}

TEST(GenData, WritesCohortsAndIsIdempotent) {
  const auto cfg = tiny();
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  gen_data(cfg, a);
  gen_data(cfg, b);
  for (std::size_t k = 0; k < 3; ++k) {
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a / ("site_" + std::to_string(k)))) files += e.is_regular_file();
    EXPECT_EQ(files, 4u + 1u + 2u);
  }
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  const auto manifest = slurp(a / "manifest.json");
  EXPECT_NE(manifest.find(config::config_hash(cfg)), std::string::npos);
  EXPECT_NE(manifest.find("\"federation\""), std::string::npos);
  EXPECT_EQ(config::to_ini(config::load_config(a / "config.ini")), config::to_ini(cfg));
}

TEST(Prior, TrainsSavesAndReloads) {
  const auto& out = tiny_prior();
  ASSERT_EQ(out.rounds.size(), 2u);
  ASSERT_EQ(out.initial_ce.size(), 3u);
  const auto csv = rounds_csv(out.rounds);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3);
  const auto dir = scratch("prior_save");
  save_prior(out.prior, dir);
  const auto back = load_prior(dir);
  EXPECT_TRUE(bit_equal(back.params, out.prior.params));
  EXPECT_TRUE(bit_equal(back.codec.params(), out.prior.codec.params()));
  EXPECT_EQ(back.cfg.d_model, 16u);
  fs::copy_file(dir / "codec.fvp", dir / "prior.fvp", fs::copy_options::overwrite_existing);
  EXPECT_THROW(load_prior(dir), FormatError);
  EXPECT_THROW(load_prior(scratch("nothing")), IoError);
}

TEST(Synthesis, DeterministicAcrossThreadCountsAndRoundTrips) {
  auto cfg = tiny();
  const auto& prior = tiny_prior().prior;
  const auto a = synthesize(cfg, prior, 2, 0, 3);
  cfg.threads = 1;
  const auto b = synthesize(cfg, prior, 2, 0, 3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bit_equal(a[i].x_ref, b[i].x_ref));
    EXPECT_NO_THROW(recon::validate_triple(a[i]));
  }
  EXPECT_THROW(synthesize(cfg, prior, 3, 0, 1), IndexError);

  const auto dir = scratch("triples");
  save_triples(a, dir);
  const auto back = load_triples(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bit_equal(back[i].y, a[i].y));
    EXPECT_TRUE(bit_equal(back[i].mask.bits, a[i].mask.bits));
    EXPECT_EQ(back[i].mask.seed, a[i].mask.seed);
  }
  // A triple whose k-space no longer matches its reference is rejected on load.
  ParamSet p = persist::load_paramset(dir / "triple_1.fvp");
  p.at("y")[3] += 0.5;
  persist::save_paramset(p, dir / "triple_1.fvp");
  EXPECT_THROW(load_triples(dir), FormatError);
}

TEST(Recon, SkipFinetuneKeepsBaselineAndFinetuneUsesOtherSites) {
  const auto cfg = tiny();
  const auto root = scratch("recon_data");
  gen_data(cfg, root);
  const auto train = load_train_sets(root, 3);
  const auto skipped = train_recon(cfg, 1, train[1], nullptr, true);
  EXPECT_TRUE(bit_equal(skipped.baseline.params, skipped.finetuned.params));
  EXPECT_THROW(train_recon(cfg, 1, train[1], nullptr, false), ConfigError);
  const auto full = train_recon(cfg, 1, train[1], &tiny_prior().prior, false);
  EXPECT_TRUE(bit_equal(full.baseline.params, skipped.baseline.params));
  EXPECT_FALSE(bit_equal(full.baseline.params, full.finetuned.params));
  EXPECT_EQ(full.finetune_log.synthetic_source, (std::vector<std::size_t>{0, 2}));
  const auto csv = recon_log_csv(full, false);
  EXPECT_NE(csv.find("finetune,1,"), std::string::npos);
  EXPECT_EQ(recon_log_csv(full, true).find("finetune"), std::string::npos);
}

TEST(Evaluate, EmitsOneRowPerModelTargetAndAcceleration) {
  const auto cfg = tiny();
  const auto root = scratch("eval_data");
  gen_data(cfg, root);
  std::vector<std::vector<Tensor>> test;
  std::vector<recon::ReconModel> models;
  for (std::size_t k = 0; k < 3; ++k) {
    test.push_back(data::load_split(root, k, "test"));
    models.push_back(recon::build_model(cfg.recon[k].arch, k, k));
  }
  const auto rows = evaluate_models(cfg, models, test);
  ASSERT_EQ(rows.size(), 18u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.metrics.n, 2u);
    EXPECT_LT(r.metrics.max_dc_residual, 1e-8);
  }
  EXPECT_EQ(rows[0].site, 0u);
  EXPECT_EQ(rows[3].target, 1u);
  EXPECT_DOUBLE_EQ(rows[1].acceleration, 8.0);
  const auto csv = eval_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 19);
  // Test operators are shared by every model evaluated on a target site.
  EXPECT_EQ(test_triples(cfg, 1, 4.0, test[1])[0].mask.seed, test_triples(cfg, 1, 4.0, test[1])[0].mask.seed);
}

TEST(Manifest, ListsFilesAndProvenance) {
  const auto cfg = tiny();
  const auto dir = scratch("manifest");
  persist::write_text(dir / "a.csv", "x\r\n");
  persist::write_text(dir / "sub" / "b.json", "{}");
  write_manifest(dir, "evaluate", cfg, R"({"note": 1})");
  const auto m = slurp(dir / "manifest.json");
  EXPECT_NE(m.find("\"a.csv\""), std::string::npos);
  EXPECT_NE(m.find("\"sub/b.json\""), std::string::npos);
  EXPECT_NE(m.find(config::config_hash(cfg)), std::string::npos);
  EXPECT_NE(m.find("\"note\""), std::string::npos);
  EXPECT_NE(m.find("\"recon_finetune\""), std::string::npos);
}

}  // namespace
}  // namespace fedprior::pipeline
