// fedprior: dataset generation, federated prior training, synthesis,
// reconstruction training and evaluation as separate commands.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "fedprior/config.hpp"
#include "fedprior/errors.hpp"
#include "fedprior/persistence.hpp"
#include "fedprior/pipeline.hpp"

namespace {

using namespace fedprior;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kTraining = 4 };

struct Common {
  std::string config;
  std::size_t threads = 0;  // 0 -> keep the config value
};

config::RunConfig resolve(const Common& c, bool required = true) {
  config::RunConfig cfg;
  if (!c.config.empty()) {
    cfg = config::load_config(c.config);
  } else if (required) {
    throw ConfigError("--config is required");
  } else {
    cfg = config::default_config();
  }
  config::apply_seed_override(cfg, std::getenv("FEDPRIOR_SEED"));
  if (c.threads) cfg.threads = c.threads;
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int run(int argc, char** argv) {
  CLI::App app{"Federated site-conditioned prior for multi-site MRI reconstruction"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--threads", common.threads, "Cap on worker threads (overrides [run] threads)")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "Generate the site cohorts");
  std::string out;
  gen->add_option("--config", common.config, "Run configuration (INI)")->required();
  gen->add_option("--out", out, "Output dataset directory")->required();

  auto* prior_cmd = app.add_subcommand("train-prior", "Pre-train the codec (optional) and run federated prior training");
  std::string data, codec_path;
  bool pretrain_codec = false;
  std::optional<std::size_t> rounds;
  prior_cmd->add_option("--config", common.config, "Run configuration (INI)")->required();
  prior_cmd->add_option("--data", data, "Dataset directory from gen-data")->required();
  prior_cmd->add_option("--out", out, "Output directory for the prior")->required();
  prior_cmd->add_flag("--pretrain-codec", pretrain_codec, "Train the codec on auxiliary phantoms first");
  prior_cmd->add_option("--codec", codec_path, "Existing codec checkpoint (default: <out>/codec.fvp)");
  prior_cmd->add_option("--rounds", rounds, "Override [federation] rounds");

  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic triples from a trained prior");
  std::string prior_dir;
  std::size_t site = 0, n = 0, ops_from = 0;
  synth_cmd->add_option("--config", common.config, "Run configuration (default: built-in defaults)");
  synth_cmd->add_option("--prior", prior_dir, "Prior directory from train-prior")->required();
  synth_cmd->add_option("--site", site, "Source site whose distribution is sampled")->required();
  synth_cmd->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);
  synth_cmd->add_option("--ops-from", ops_from, "Site whose acquisition operators are used")->required();
  synth_cmd->add_option("--out", out, "Output directory")->required();

  auto* recon_cmd = app.add_subcommand("train-recon", "Local pre-training and hybrid fine-tuning of one site's model");
  bool skip_finetune = false;
  recon_cmd->add_option("--config", common.config, "Run configuration (INI)")->required();
  recon_cmd->add_option("--site", site, "Site index")->required();
  recon_cmd->add_option("--prior", prior_dir, "Prior directory (not needed with --skip-finetune)");
  recon_cmd->add_option("--data", data, "Dataset directory from gen-data")->required();
  recon_cmd->add_option("--out", out, "Output model directory")->required();
  recon_cmd->add_flag("--skip-finetune", skip_finetune, "Stop after local pre-training (single-site baseline)");

  auto* eval_cmd = app.add_subcommand("evaluate", "Within- and across-site metrics of every site model");
  std::string models;
  eval_cmd->add_option("--config", common.config, "Run configuration (INI)")->required();
  eval_cmd->add_option("--models", models, "Directory holding site_<k> models")->required();
  eval_cmd->add_option("--data", data, "Dataset directory from gen-data")->required();
  eval_cmd->add_option("--out", out, "Output directory for metrics.csv and report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  if (gen->parsed()) {
    const auto cfg = resolve(common);
    pipeline::gen_data(cfg, out);
    log_line("wrote " + std::to_string(cfg.sites.count) + " site cohorts to " + out);
  } else if (prior_cmd->parsed()) {
    auto cfg = resolve(common);
    if (rounds) {
      cfg.federation.rounds = *rounds;
      cfg.validate();
    }
    const fs::path dir(out);
    vq::Codec codec = [&] {
      if (pretrain_codec) {
        auto c = pipeline::train_codec(cfg, log_line);
        persist::save_paramset(c.params(), dir / "codec.fvp");
        return c;
      }
      const fs::path p = codec_path.empty() ? dir / "codec.fvp" : fs::path(codec_path);
      if (!fs::exists(p)) throw IoError("no codec checkpoint at " + p.string() + " (pass --pretrain-codec)");
      return pipeline::load_codec(p, cfg.codec.model);
    }();
    const auto res = pipeline::train_prior(cfg, codec, pipeline::load_train_sets(data, cfg.sites.count), log_line);
    pipeline::save_prior(res.prior, dir);
    persist::write_text(dir / "rounds.csv", pipeline::rounds_csv(res.rounds));
    persist::write_text(dir / "config.ini", config::to_ini(cfg));
    double first = 0.0, last = 0.0;
    for (std::size_t k = 0; k < cfg.sites.count; ++k) {
      first += res.initial_ce[k] / static_cast<double>(cfg.sites.count);
      last += res.final_ce[k] / static_cast<double>(cfg.sites.count);
    }
    pipeline::write_manifest(dir, "train-prior", cfg,
                             "{\"initial_token_ce\": " + persist::format_double(first) +
                                 ", \"final_token_ce\": " + persist::format_double(last) +
                                 ", \"codec_pretrained\": " + (pretrain_codec ? "true" : "false") + "}");
    log_line("mean token cross-entropy " + persist::format_double(first) + " -> " + persist::format_double(last));
  } else if (synth_cmd->parsed()) {
    const auto cfg = resolve(common, false);
    if (ops_from >= cfg.sites.count) throw IndexError("--ops-from site out of range");
    const auto prior = pipeline::load_prior(prior_dir);
    const auto triples = pipeline::synthesize(cfg, prior, site, ops_from, n);
    pipeline::save_triples(triples, out);
    pipeline::write_manifest(out, "synth", cfg,
                             "{\"source_site\": " + std::to_string(site) + ", \"ops_from\": " + std::to_string(ops_from) +
                                 ", \"n\": " + std::to_string(n) + ", \"seed\": " +
                                 std::to_string(config::derive_seeds(cfg.master_seed).synth(ops_from, site)) + "}");
    log_line("wrote " + std::to_string(n) + " synthetic triples to " + out);
  } else if (recon_cmd->parsed()) {
    const auto cfg = resolve(common);
    if (site >= cfg.sites.count) throw IndexError("--site out of range");
    std::optional<ar::PriorModel> prior;
    if (!skip_finetune) {
      if (prior_dir.empty()) throw ConfigError("--prior is required unless --skip-finetune is given");
      prior = pipeline::load_prior(prior_dir);
    }
    const auto local = data::load_split(data, site, "train");
    const auto res = pipeline::train_recon(cfg, site, local, prior ? &*prior : nullptr, skip_finetune, log_line);
    const fs::path dir(out);
    const std::string stem = "site_" + std::to_string(site);
    recon::save_model(res.finetuned, dir / stem);
    persist::write_text(dir / (stem + "_train.csv"), pipeline::recon_log_csv(res, skip_finetune));
    pipeline::write_manifest(dir, "train-recon", cfg,
                             "{\"site\": " + std::to_string(site) + ", \"skip_finetune\": " +
                                 (skip_finetune ? "true" : "false") + "}");
  } else if (eval_cmd->parsed()) {
    const auto cfg = resolve(common);
    std::vector<recon::ReconModel> ms;
    std::vector<std::vector<Tensor>> test;
    for (std::size_t k = 0; k < cfg.sites.count; ++k) {
      ms.push_back(recon::load_model(fs::path(models) / ("site_" + std::to_string(k))));
      if (ms.back().site != k) throw FormatError("model file for site " + std::to_string(k) + " names another site", 0);
      test.push_back(data::load_split(data, k, "test"));
    }
    const auto rows = pipeline::evaluate_models(cfg, ms, test);
    const fs::path dir(out);
    persist::write_text(dir / "metrics.csv", pipeline::eval_csv(rows));
    double worst_dc = 0.0;
    for (const auto& r : rows) worst_dc = std::max(worst_dc, r.metrics.max_dc_residual);
    persist::write_text(dir / "report.json", "{\n  \"config_hash\": \"" + config::config_hash(cfg) +
                                                 "\",\n  \"rows\": " + std::to_string(rows.size()) +
                                                 ",\n  \"max_dc_residual\": " + persist::format_double(worst_dc) +
                                                 ",\n  \"seeds\": " +
                                                 config::seeds_json(config::derive_seeds(cfg.master_seed), cfg.sites.count) +
                                                 "\n}\n");
    pipeline::write_manifest(dir, "evaluate", cfg, "{\"models\": \"" + models + "\"}");
    for (const auto& r : rows) {
      log_line("site " + std::to_string(r.site) + " on " + std::to_string(r.target) + " R=" +
               persist::format_double(r.acceleration) + ": PSNR " + persist::format_double(r.metrics.psnr_mean) +
               " SSIM " + persist::format_double(r.metrics.ssim_mean));
    }
  }
  log_line("done in " + persist::format_double(std::round(elapsed() * 10) / 10) + " s");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const fedprior::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const fedprior::IndexError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const fedprior::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const fedprior::FormatError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTraining;
  }
}
