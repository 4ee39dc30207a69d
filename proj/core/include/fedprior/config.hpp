#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedprior/ar_transformer.hpp"
#include "fedprior/datasets.hpp"
#include "fedprior/recon_models.hpp"
#include "fedprior/vq_codec.hpp"

/// Run configuration: an INI file with sections [run], [sites], [codec],
/// [prior], [federation], [recon.site_<k>] and [eval].
namespace fedprior::config {

struct SitesSection {
  std::size_t count = 3;
  data::DatasetLayout layout;
  // Per-site overrides of the default cohorts; empty -> defaults.
  std::vector<double> base_intensity;
  std::vector<double> texture_freq;
  std::vector<int> polarity;
  std::vector<std::size_t> min_ellipses;
  std::vector<std::size_t> max_ellipses;
};

struct CodecSection {
  vq::CodecConfig model;
  vq::CodecTrainConfig train;
  std::size_t aux_images = 256;
};

struct PriorSection {
  ar::TransformerConfig model;
  ar::LocalTrainConfig train;
  double final_lr_fraction = 0.1;  // per-round cosine decay target
  ar::SampleOptions sampling;
};

struct FederationSection {
  std::size_t rounds = 50;
  std::vector<double> weights;  // empty -> uniform
};

struct ReconSection {
  recon::ArchSpec arch;
  std::size_t pretrain_epochs = 30;
  std::size_t finetune_epochs = 30;
  std::size_t batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::vector<double> accelerations{4.0};
  std::size_t synthetic_count = 0;  // per source site; 0 -> local training-set size
};

struct EvalSection {
  std::vector<double> accelerations{4.0, 8.0};
  std::size_t ncoils = 1;
  std::size_t acs_half_width = 0;  // 0 -> default for the image size
};

struct RunConfig {
  std::uint64_t master_seed = 7;
  std::size_t threads = 1;
  SitesSection sites;
  CodecSection codec;
  PriorSection prior;
  FederationSection federation;
  std::vector<ReconSection> recon;  // one per site
  EvalSection eval;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// Built-in defaults: cascade-3 / conv-autoencoder / unrolled-5 at sites 0 / 1 / 2.
RunConfig default_config();

/// Throws ConfigError on syntax errors, missing required sections, unknown
/// sections or keys, and malformed values. Sections may be given with no keys
/// to accept every default; [run] is optional.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical INI text of every resolved value; parse_config(to_ini(c)) == c.
std::string to_ini(const RunConfig& cfg);
/// FNV-1a of to_ini, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

/// Replaces the master seed when `value` is non-null (FEDPRIOR_SEED).
void apply_seed_override(RunConfig& cfg, const char* value);

std::vector<data::SiteSpec> site_specs(const RunConfig& cfg);

/// Every stream seed used by the pipeline, derived from the master seed.
struct Seeds {
  std::uint64_t master = 0;
  std::uint64_t split = 0;
  std::uint64_t aux_images = 0;
  std::uint64_t codec = 0;
  std::uint64_t prior_init = 0;
  std::uint64_t federation = 0;

  std::uint64_t recon_init(std::size_t site) const;
  std::uint64_t recon_pretrain(std::size_t site) const;
  std::uint64_t recon_finetune(std::size_t site) const;
  std::uint64_t synth(std::size_t site, std::size_t source) const;
  /// Acquisition operators of a site (training pool and evaluation).
  std::uint64_t operators(std::size_t site) const;
  std::uint64_t train_stream(std::size_t site) const;
  std::uint64_t eval_stream(std::size_t site, double acceleration) const;
};

Seeds derive_seeds(std::uint64_t master);
/// JSON object naming every seed for `sites` sites.
std::string seeds_json(const Seeds& s, std::size_t sites);

}  // namespace fedprior::config
