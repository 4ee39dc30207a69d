#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedprior/ar_transformer.hpp"
#include "fedprior/imaging.hpp"
#include "fedprior/nn.hpp"
#include "fedprior/numerics/adamw.hpp"
#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/rng.hpp"

/// Site-specific reconstruction networks with data-consistency blocks and
/// their two-stage training (local pre-training, hybrid fine-tuning).
namespace fedprior::recon {

enum class Family { unrolled, cascade_dc, conv_autoencoder };

std::string family_name(Family f);
/// Accepts "unrolled", "cascade-dc", "conv-autoencoder".
Family parse_family(const std::string& s);

struct ArchSpec {
  Family family = Family::cascade_dc;
  std::size_t cascades = 3;  // ignored by conv-autoencoder
  std::size_t width = 16;
  double mu_init = 0.05;

  void validate() const;
  std::string to_json() const;
  static ArchSpec from_json(const std::string& text);
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct ReconModel {
  ArchSpec spec;
  ParamSet params;
  std::size_t site = 0;
};

/// He-uniform convolutions; the last conv of every denoiser starts at zero so
/// fresh denoisers are the identity. Soft-DC weights start at mu_init.
ReconModel build_model(const ArchSpec& spec, std::size_t site, std::uint64_t seed);

/// Undersampled acquisition of one reference image.
struct Triple {
  Tensor x_ref;   // complex [H, W, 2]
  Tensor y;       // k-space [C, H, W, 2]
  Tensor x_us;    // adjoint_op(y)
  imaging::Mask mask;
  imaging::CoilSet coils;

  imaging::ImagingOperator op() const { return imaging::ImagingOperator(mask, coils); }
};

/// Draws acquisition operators for one site: acceleration picked uniformly
/// from `accelerations`, a fresh mask seed per draw, fixed coils.
struct OperatorPool {
  std::vector<double> accelerations{4.0};
  std::size_t acs_half_width = 0;  // 0 -> default for the image size
  std::size_t ncoils = 1;
  std::uint64_t seed = 0;

  imaging::ImagingOperator draw(std::size_t h, std::size_t w, std::uint64_t index) const;
};

Triple make_triple(const Tensor& x_ref, const imaging::ImagingOperator& op);
std::vector<Triple> make_triples(const std::vector<Tensor>& images, const OperatorPool& pool, std::uint64_t stream);

/// n images generated for `source_site`, each paired with a fresh operator
/// from `pool` (the target site's acquisition settings). Sample i depends only
/// on (seed, i).
std::vector<Triple> synth_site_dataset(const ar::PriorModel& prior, std::size_t source_site, const OperatorPool& pool,
                                       std::size_t n, std::uint64_t seed, const ar::SampleOptions& opts = {});

/// Throws ContractError unless x_us == adjoint(y) and y == A x_ref (1e-10 relative).
void validate_triple(const Triple& t);

/// Soft data consistency on coil k-space: sampled entries become
/// (k + mu y) / (1 + mu), i.e. x + mu / (1 + mu) * A^H (y - A x).
Tensor dc_block(const Tensor& x, const Tensor& y, const imaging::ImagingOperator& op, double mu);
/// mu -> infinity: measured samples substituted.
Tensor dc_hard(const Tensor& x, const Tensor& y, const imaging::ImagingOperator& op);

/// Differentiable form. `t` is a [1] Var holding mu / (1 + mu) or nullptr for hard DC.
ad::Var dc_graph(ad::Var x, const Triple& tr, const ad::Var* t);

ad::Var forward_graph(const nn::Bound& p, const ArchSpec& spec, const Triple& tr);
Tensor forward_recon(const ReconModel& model, const Triple& tr);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  AdamWHyper hyper{1e-3, 0.9, 0.95, 0.0, 1e-8};
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<std::size_t> synthetic_source;  // per fine-tuning epoch
};

/// Minimises mean ||x_ref - H(x_us, y)||^2 with AdamW.
ReconModel pretrain_local(ReconModel model, const std::vector<Triple>& local, const TrainConfig& cfg, std::uint64_t seed,
                          TrainLog* log = nullptr);

/// Synthetic source for fine-tuning epoch `e` of site `k` among `k_sites`:
/// round-robin over the other sites in index order.
std::size_t synthetic_source(std::size_t e, std::size_t k, std::size_t k_sites);

/// Epoch e trains on local ∪ synthetic[j(e)], shuffled together.
ReconModel finetune_hybrid(ReconModel model, const std::vector<Triple>& local,
                           const std::map<std::size_t, std::vector<Triple>>& synthetic, std::size_t k_sites,
                           const TrainConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr);

struct Metrics {
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  std::size_t n = 0;
  std::size_t inf_count = 0;       // infinite PSNR, excluded from the PSNR mean
  double max_dc_residual = 0.0;    // ||M (A x_hat - y)|| / ||y|| over the set
};

Metrics evaluate(const ReconModel& model, const std::vector<Triple>& test);

/// site,target_site,R,psnr_mean,psnr_std,ssim_mean,ssim_std,n,inf_count
std::string metrics_csv_header();
std::string metrics_csv_row(std::size_t site, std::size_t target_site, double acceleration, const Metrics& m);

void save_model(const ReconModel& model, const std::filesystem::path& stem);
ReconModel load_model(const std::filesystem::path& stem);

}  // namespace fedprior::recon
