#include "fedprior/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <nlohmann/json.hpp>
#include <thread>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/adamw.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::pipeline {

using config::RunConfig;
using nlohmann::json;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

json run_json(const std::string& command, const RunConfig& cfg) {
  return json{{"command", command},
              {"config_hash", config::config_hash(cfg)},
              {"seeds", json::parse(config::seeds_json(config::derive_seeds(cfg.master_seed), cfg.sites.count))}};
}

json codec_config_json(const vq::CodecConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"widths", c.widths},
              {"latent_channels", c.latent_channels},
              {"vocab", c.vocab},
              {"schedule", c.schedule}};
}

vq::CodecConfig codec_config_from(const json& j) {
  vq::CodecConfig c;
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.latent_channels = j.at("latent_channels").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.schedule = j.at("schedule").get<std::vector<std::size_t>>();
  c.validate();
  return c;
}

json transformer_config_json(const ar::TransformerConfig& c) {
  return json{{"d_model", c.d_model},
              {"layers", c.layers},
              {"heads", c.heads},
              {"ffn_mult", c.ffn_mult},
              {"sites", c.sites},
              {"vocab", c.vocab},
              {"schedule", c.schedule},
              {"site_loss_weight", c.site_loss_weight},
              {"start_noise_std", c.start_noise_std}};
}

ar::TransformerConfig transformer_config_from(const json& j) {
  ar::TransformerConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.sites = j.at("sites").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.schedule = j.at("schedule").get<std::vector<std::size_t>>();
  c.site_loss_weight = j.at("site_loss_weight").get<double>();
  c.start_noise_std = j.at("start_noise_std").get<double>();
  c.validate();
  return c;
}

void say(const Log& log, const std::string& s) {
  if (log) log(s);
}

}  // namespace

void gen_data(const RunConfig& cfg, const fs::path& out) {
  const auto seeds = config::derive_seeds(cfg.master_seed);
  data::write_dataset(out, config::site_specs(cfg), cfg.sites.layout, seeds.split, run_json("gen-data", cfg).dump());
  persist::write_text(out / "config.ini", config::to_ini(cfg));
}

std::vector<std::vector<Tensor>> load_train_sets(const fs::path& data, std::size_t sites) {
  std::vector<std::vector<Tensor>> out;
  for (std::size_t k = 0; k < sites; ++k) out.push_back(data::load_split(data, k, "train"));
  return out;
}

vq::Codec train_codec(const RunConfig& cfg, const Log& log) {
  const auto seeds = config::derive_seeds(cfg.master_seed);
  const auto& l = cfg.sites.layout;
  const auto aux = data::gen_aux_phantoms(cfg.codec.aux_images, l.height, l.width, seeds.aux_images);
  auto train = cfg.codec.train;
  train.seed = seeds.codec;
  return vq::pretrain_codec(aux, cfg.codec.model, train, nullptr, [&](std::size_t e, double loss) {
    say(log, "codec epoch " + std::to_string(e) + " loss " + persist::format_double(loss));
  });
}

PriorOutcome train_prior(const RunConfig& cfg, const vq::Codec& codec, const std::vector<std::vector<Tensor>>& site_train,
                         const Log& log) {
  const std::size_t k_sites = cfg.sites.count;
  if (site_train.size() != k_sites) throw ConfigError("need one training set per site");
  const auto seeds = config::derive_seeds(cfg.master_seed);
  const auto& tc = cfg.prior.model;

  std::vector<std::vector<vq::TokenPyramid>> pyramids(k_sites);
  for (std::size_t k = 0; k < k_sites; ++k) {
    pyramids[k].resize(site_train[k].size());
    parallel_for(site_train[k].size(), cfg.threads,
                 [&](std::size_t i) { pyramids[k][i] = codec.encode_multiscale(site_train[k][i]); });
  }

  PriorOutcome out{{tc, ar::init_transformer(tc, seeds.prior_init), codec}, {}, {}, {}};
  for (std::size_t k = 0; k < k_sites; ++k) out.initial_ce.push_back(ar::mean_token_ce(out.prior.params, tc, pyramids[k], k));

  fed::FederationConfig fc;
  fc.sites = k_sites;
  fc.rounds = cfg.federation.rounds;
  fc.weights = cfg.federation.weights;
  fc.seed = seeds.federation;
  fc.threads = cfg.threads;
  const auto trainer = [&](std::size_t site, const ParamSet& start, std::size_t round, std::uint64_t seed) {
    const double scale = cosine_lr(1.0, cfg.prior.final_lr_fraction, round, fc.rounds);
    auto r = ar::local_train(start, tc, site, pyramids[site], cfg.prior.train, seed, scale);
    return fed::LocalUpdate{std::move(r.params), std::move(r.epoch_token_ce)};
  };
  auto res = fed::run_federation(fc, out.prior.params, trainer, [&](const fed::RoundLog& r) {
    std::string line = "round " + std::to_string(r.round) + " token ce";
    for (double v : r.site_mean_loss) line += " " + persist::format_double(v);
    say(log, line);
  });
  out.prior.params = std::move(res.global);
  out.rounds = std::move(res.rounds);
  for (std::size_t k = 0; k < k_sites; ++k) out.final_ce.push_back(ar::mean_token_ce(out.prior.params, tc, pyramids[k], k));
  return out;
}

std::string rounds_csv(const std::vector<fed::RoundLog>& rounds) {
  std::string s = persist::csv_row({"round", "site", "loss", "checksum"});
  for (const auto& r : rounds) {
    for (std::size_t k = 0; k < r.site_mean_loss.size(); ++k) {
      s += persist::csv_row({std::to_string(r.round), std::to_string(k), persist::format_double(r.site_mean_loss[k]),
                             persist::hex64(r.checksum)});
    }
  }
  return s;
}

void save_prior(const ar::PriorModel& prior, const fs::path& dir) {
  persist::save_paramset(prior.codec.params(), dir / "codec.fvp");
  persist::save_paramset(prior.params, dir / "prior.fvp");
  const json j{{"codec", codec_config_json(prior.codec.config())}, {"transformer", transformer_config_json(prior.cfg)}};
  persist::write_text(dir / "prior.json", j.dump(2) + "\n");
}

vq::Codec load_codec(const fs::path& path, const vq::CodecConfig& cfg) {
  ParamSet p = persist::load_paramset(path);
  if (!vq::init_codec(cfg, 0).shape_compatible(p)) throw FormatError("codec parameters do not match the configuration", 0);
  return vq::Codec(cfg, std::move(p));
}

ar::PriorModel load_prior(const fs::path& dir) {
  const auto bytes = persist::read_file(dir / "prior.json");
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
    ar::TransformerConfig tc = transformer_config_from(j.at("transformer"));
    vq::Codec codec = load_codec(dir / "codec.fvp", codec_config_from(j.at("codec")));
    ParamSet p = persist::load_paramset(dir / "prior.fvp");
    if (!ar::init_transformer(tc, 0).shape_compatible(p)) {
      throw FormatError("prior parameters do not match prior.json", 0);
    }
    return ar::PriorModel{tc, std::move(p), std::move(codec)};
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad prior.json: ") + e.what(), 0);
  }
}

recon::OperatorPool train_pool(const RunConfig& cfg, std::size_t site) {
  const auto seeds = config::derive_seeds(cfg.master_seed);
  return recon::OperatorPool{cfg.recon.at(site).accelerations, cfg.eval.acs_half_width, cfg.eval.ncoils,
                             seeds.operators(site)};
}

recon::OperatorPool eval_pool(const RunConfig& cfg, std::size_t site, double acceleration) {
  const auto seeds = config::derive_seeds(cfg.master_seed);
  return recon::OperatorPool{{acceleration}, cfg.eval.acs_half_width, cfg.eval.ncoils, seeds.operators(site)};
}

std::vector<recon::Triple> train_triples(const RunConfig& cfg, std::size_t site, const std::vector<Tensor>& images) {
  return recon::make_triples(images, train_pool(cfg, site), config::derive_seeds(cfg.master_seed).train_stream(site));
}

std::vector<recon::Triple> test_triples(const RunConfig& cfg, std::size_t site, double acceleration,
                                        const std::vector<Tensor>& images) {
  return recon::make_triples(images, eval_pool(cfg, site, acceleration),
                             config::derive_seeds(cfg.master_seed).eval_stream(site, acceleration));
}

std::vector<recon::Triple> synthesize(const RunConfig& cfg, const ar::PriorModel& prior, std::size_t source,
                                      std::size_t ops_site, std::size_t n) {
  if (source >= prior.cfg.sites) throw IndexError("source site out of range for this prior");
  const std::uint64_t seed = config::derive_seeds(cfg.master_seed).synth(ops_site, source);
  const auto pool = train_pool(cfg, ops_site);
  // Sample i depends only on (seed, i), so chunking over workers is exact.
  std::vector<recon::Triple> out(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const auto one = recon::synth_site_dataset(prior, source, pool, 1, derive_seed(seed, {i}), cfg.prior.sampling);
    out[i] = one.front();
  });
  return out;
}

void save_triples(const std::vector<recon::Triple>& triples, const fs::path& dir) {
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto& t = triples[i];
    ParamSet p;
    p.add("coils", t.coils.sens);
    p.add("mask", t.mask.bits);
    // The seed is split into 32-bit halves so it survives the f64 payload.
    p.add("mask_meta", Tensor({4}, std::vector<double>{t.mask.acceleration, static_cast<double>(t.mask.acs_half_width),
                                                       static_cast<double>(t.mask.seed >> 32),
                                                       static_cast<double>(t.mask.seed & 0xffffffffULL)}));
    p.add("x_ref", t.x_ref);
    p.add("x_us", t.x_us);
    p.add("y", t.y);
    persist::save_paramset(p, dir / ("triple_" + std::to_string(i) + ".fvp"));
  }
}

std::vector<recon::Triple> load_triples(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("missing triple directory " + dir.string());
  std::vector<recon::Triple> out;
  for (std::size_t i = 0;; ++i) {
    const auto path = dir / ("triple_" + std::to_string(i) + ".fvp");
    if (!fs::exists(path)) break;
    const ParamSet p = persist::load_paramset(path);
    try {
      recon::Triple t;
      t.coils.sens = p.at("coils");
      t.mask.bits = p.at("mask");
      const Tensor& meta = p.at("mask_meta");
      t.mask.acceleration = meta[0];
      t.mask.acs_half_width = static_cast<std::size_t>(meta[1]);
      if (meta.size() != 4) throw FormatError("mask_meta must hold 4 values", 0);
      t.mask.seed = (static_cast<std::uint64_t>(meta[2]) << 32) | static_cast<std::uint64_t>(meta[3]);
      t.x_ref = p.at("x_ref");
      t.x_us = p.at("x_us");
      t.y = p.at("y");
      recon::validate_triple(t);
      out.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ": " + e.what(), 0);
    }
  }
  return out;
}

ReconOutcome train_recon(const RunConfig& cfg, std::size_t site, const std::vector<Tensor>& local,
                         const ar::PriorModel* prior, bool skip_finetune, const Log& log) {
  if (site >= cfg.sites.count) throw IndexError("site out of range");
  if (!skip_finetune && !prior) throw ConfigError("hybrid fine-tuning needs a trained prior");
  const auto seeds = config::derive_seeds(cfg.master_seed);
  const auto& rc = cfg.recon[site];
  recon::TrainConfig tc;
  tc.batch = rc.batch;
  tc.hyper.lr = rc.lr;
  tc.hyper.weight_decay = rc.weight_decay;

  const auto local_triples = train_triples(cfg, site, local);
  ReconOutcome out;
  tc.epochs = rc.pretrain_epochs;
  out.baseline = recon::pretrain_local(recon::build_model(rc.arch, site, seeds.recon_init(site)), local_triples, tc,
                                       seeds.recon_pretrain(site), &out.pretrain_log);
  say(log, "site " + std::to_string(site) + " pre-training done, final loss " +
               (out.pretrain_log.epoch_loss.empty() ? std::string("n/a")
                                                    : persist::format_double(out.pretrain_log.epoch_loss.back())));
  if (skip_finetune) {
    out.finetuned = out.baseline;
    return out;
  }
  const std::size_t n_syn = rc.synthetic_count ? rc.synthetic_count : local.size();
  std::map<std::size_t, std::vector<recon::Triple>> synthetic;
  for (std::size_t j = 0; j < cfg.sites.count; ++j) {
    if (j == site) continue;
    synthetic[j] = synthesize(cfg, *prior, j, site, n_syn);
    say(log, "site " + std::to_string(site) + ": " + std::to_string(n_syn) + " synthetic images from site " +
                 std::to_string(j));
  }
  tc.epochs = rc.finetune_epochs;
  out.finetuned = recon::finetune_hybrid(out.baseline, local_triples, synthetic, cfg.sites.count, tc,
                                         seeds.recon_finetune(site), &out.finetune_log);
  say(log, "site " + std::to_string(site) + " fine-tuning done");
  return out;
}

std::string recon_log_csv(const ReconOutcome& r, bool skip_finetune) {
  std::string s = persist::csv_row({"stage", "epoch", "loss", "synthetic_source"});
  for (std::size_t e = 0; e < r.pretrain_log.epoch_loss.size(); ++e) {
    s += persist::csv_row({"pretrain", std::to_string(e), persist::format_double(r.pretrain_log.epoch_loss[e]), ""});
  }
  if (skip_finetune) return s;
  for (std::size_t e = 0; e < r.finetune_log.epoch_loss.size(); ++e) {
    s += persist::csv_row({"finetune", std::to_string(e), persist::format_double(r.finetune_log.epoch_loss[e]),
                           std::to_string(r.finetune_log.synthetic_source[e])});
  }
  return s;
}

std::vector<EvalRow> evaluate_models(const RunConfig& cfg, const std::vector<recon::ReconModel>& models,
                                     const std::vector<std::vector<Tensor>>& site_test) {
  const std::size_t k_sites = site_test.size();
  const auto& accs = cfg.eval.accelerations;
  std::vector<std::vector<recon::Triple>> sets(k_sites * accs.size());
  for (std::size_t j = 0; j < k_sites; ++j) {
    for (std::size_t a = 0; a < accs.size(); ++a) sets[j * accs.size() + a] = test_triples(cfg, j, accs[a], site_test[j]);
  }
  std::vector<EvalRow> rows(models.size() * k_sites * accs.size());
  parallel_for(rows.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t m = i / (k_sites * accs.size());
    const std::size_t j = (i / accs.size()) % k_sites;
    const std::size_t a = i % accs.size();
    rows[i] = EvalRow{models[m].site, j, accs[a], recon::evaluate(models[m], sets[j * accs.size() + a])};
  });
  return rows;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::string s = recon::metrics_csv_header();
  for (const auto& r : rows) s += recon::metrics_csv_row(r.site, r.target, r.acceleration, r.metrics);
  return s;
}

void write_manifest(const fs::path& out, const std::string& command, const RunConfig& cfg, const std::string& extra_json) {
  json j = run_json(command, cfg);
  j["extra"] = json::parse(extra_json);
  std::vector<std::string> files;
  if (fs::is_directory(out)) {
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), out).generic_string();
      if (rel != "manifest.json") files.push_back(rel);
    }
  }
  std::sort(files.begin(), files.end());
  j["files"] = files;
  persist::write_text(out / "manifest.json", j.dump(2) + "\n");
}

}  // namespace fedprior::pipeline
