#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedprior/ar_transformer.hpp"
#include "fedprior/config.hpp"
#include "fedprior/federation.hpp"
#include "fedprior/recon_models.hpp"

/// The experiment stages shared by the command line tool and the acceptance
/// suite: data generation, codec and prior training, synthesis,
/// reconstruction training and evaluation.
namespace fedprior::pipeline {

namespace fs = std::filesystem;
using Log = std::function<void(const std::string&)>;

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written by index so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Writes the site cohorts, the resolved config and manifest.json under `out`.
void gen_data(const config::RunConfig& cfg, const fs::path& out);

/// Per-site training images from a dataset directory.
std::vector<std::vector<Tensor>> load_train_sets(const fs::path& data, std::size_t sites);

vq::Codec train_codec(const config::RunConfig& cfg, const Log& log = {});

struct PriorOutcome {
  ar::PriorModel prior;
  std::vector<fed::RoundLog> rounds;
  std::vector<double> initial_ce;  // per site, before the first round
  std::vector<double> final_ce;    // per site, global model after the last round
};

/// Tokenises each site's training set with the frozen codec and runs the
/// federated rounds.
PriorOutcome train_prior(const config::RunConfig& cfg, const vq::Codec& codec,
                         const std::vector<std::vector<Tensor>>& site_train, const Log& log = {});

/// round,site,loss,checksum: one row per round and site.
std::string rounds_csv(const std::vector<fed::RoundLog>& rounds);

/// <dir>/codec.fvp, <dir>/prior.fvp and <dir>/prior.json (architectures).
void save_prior(const ar::PriorModel& prior, const fs::path& dir);
ar::PriorModel load_prior(const fs::path& dir);
vq::Codec load_codec(const fs::path& path, const vq::CodecConfig& cfg);

recon::OperatorPool train_pool(const config::RunConfig& cfg, std::size_t site);
recon::OperatorPool eval_pool(const config::RunConfig& cfg, std::size_t site, double acceleration);
std::vector<recon::Triple> train_triples(const config::RunConfig& cfg, std::size_t site, const std::vector<Tensor>& images);
std::vector<recon::Triple> test_triples(const config::RunConfig& cfg, std::size_t site, double acceleration,
                                        const std::vector<Tensor>& images);

/// n samples of `source` paired with operators from site `ops_site`'s pool.
std::vector<recon::Triple> synthesize(const config::RunConfig& cfg, const ar::PriorModel& prior, std::size_t source,
                                      std::size_t ops_site, std::size_t n);

/// triple_<i>.fvp per triple; loading validates every triple.
void save_triples(const std::vector<recon::Triple>& triples, const fs::path& dir);
std::vector<recon::Triple> load_triples(const fs::path& dir);

struct ReconOutcome {
  recon::ReconModel baseline;   // after local pre-training only
  recon::ReconModel finetuned;  // after hybrid fine-tuning (== baseline when skipped)
  recon::TrainLog pretrain_log;
  recon::TrainLog finetune_log;
};

/// `prior` may be null only when `skip_finetune` is set.
ReconOutcome train_recon(const config::RunConfig& cfg, std::size_t site, const std::vector<Tensor>& local,
                         const ar::PriorModel* prior, bool skip_finetune, const Log& log = {});

/// stage,epoch,loss,synthetic_source
std::string recon_log_csv(const ReconOutcome& r, bool skip_finetune);

struct EvalRow {
  std::size_t site = 0;
  std::size_t target = 0;
  double acceleration = 0.0;
  recon::Metrics metrics;
};

/// Every model on every site's test set at every configured acceleration.
std::vector<EvalRow> evaluate_models(const config::RunConfig& cfg, const std::vector<recon::ReconModel>& models,
                                     const std::vector<std::vector<Tensor>>& site_test);
std::string eval_csv(const std::vector<EvalRow>& rows);

/// manifest.json with the command, config hash, all seeds, the files written
/// under `out` and a free-form JSON object `extra`.
void write_manifest(const fs::path& out, const std::string& command, const config::RunConfig& cfg,
                    const std::string& extra_json = "{}");

}  // namespace fedprior::pipeline
