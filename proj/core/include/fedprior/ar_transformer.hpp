#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedprior/nn.hpp"
#include "fedprior/numerics/adamw.hpp"
#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/rng.hpp"
#include "fedprior/vq_codec.hpp"

/// Site-prompted next-scale autoregressive transformer over token pyramids.
///
/// Sequence layout: row 0 is the site token; rows 1.. hold the scales in
/// order. Scale 1 receives a learned start embedding, scale s > 1 receives
/// the token embeddings of f_{s-1} bilinearly upsampled to p_s x p_s. Row i
/// may attend to row j iff scale(j) <= scale(i) (the site token has scale 0),
/// so logits at scale s depend only on the site and f_{<s}.
namespace fedprior::ar {

struct TransformerConfig {
  std::size_t d_model = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t sites = 3;
  std::size_t vocab = 128;
  std::vector<std::size_t> schedule{1, 2, 4, 8};
  double site_loss_weight = 0.0015;  // auxiliary site-classification term
  double start_noise_std = 0.0;      // noise on the start embedding when generating

  std::size_t tokens() const;
  std::size_t seq_len() const { return tokens() + 1; }
  void validate() const;
};

ParamSet init_transformer(const TransformerConfig& cfg, std::uint64_t seed);

/// Scale id per sequence row (0 for the site token).
std::vector<std::size_t> scale_ids(const TransformerConfig& cfg);
/// Row-major [T+1, T+1] attention permissions.
std::vector<std::uint8_t> scale_mask(const TransformerConfig& cfg);

struct Forward {
  ad::Var logits;      // [T, V]
  ad::Var site_logits; // [1, K] probe on the site-token output
  ad::Var input;       // [T+1, d] h_0
};

/// Builds h_0 for a pyramid. `start_noise` (optional, [1, d]) is added to the
/// start embedding.
ad::Var build_input(const nn::Bound& p, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site,
                    const Tensor* start_noise = nullptr);
/// gamma(st) * layer_norm(h) + beta(st) with gamma = 1 + st W_g + b_g.
ad::Var adaln(const nn::Bound& p, const std::string& path, ad::Var h, ad::Var st);
/// Multi-head attention with unit-norm queries and keys.
ad::Var mhsa(const nn::Bound& p, const TransformerConfig& cfg, const std::string& path, ad::Var h,
             std::span<const std::uint8_t> mask);
Forward forward_graph(const nn::Bound& p, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site,
                      const Tensor* start_noise = nullptr);

/// Logits [T, V] as a plain tensor.
Tensor forward(const ParamSet& params, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site);

/// Token cross-entropy plus weighted site-classification cross-entropy,
/// averaged over the batch.
struct PriorLoss {
  ad::Var total;
  double token_ce = 0.0;
  double site_ce = 0.0;
};
PriorLoss loss_prior(const nn::Bound& p, const TransformerConfig& cfg, std::span<const vq::TokenPyramid> batch,
                     std::span<const std::size_t> sites);

/// Keeps the ceil(q V) largest logits (ties by index), renormalises and draws.
std::uint32_t sample_nucleus(std::span<const double> logits, double q, Rng& rng);
std::size_t nucleus_size(std::size_t vocab, double q);
std::uint32_t greedy(std::span<const double> logits);

struct SampleOptions {
  double keep_fraction = 0.05;
  bool greedy = false;
};

/// Scale-by-scale generation: one forward pass per scale, all positions of a
/// scale drawn jointly.
vq::TokenPyramid generate_tokens(const ParamSet& params, const TransformerConfig& cfg, std::size_t site, Rng& rng,
                                 const SampleOptions& opts = {});

struct PriorModel {
  TransformerConfig cfg;
  ParamSet params;
  vq::Codec codec;
};

struct Generated {
  vq::TokenPyramid tokens;
  Tensor image;  // complex [H, W, 2], magnitude clipped to [0, 1]
};
Generated generate(const PriorModel& prior, std::size_t site, Rng& rng, const SampleOptions& opts = {});

/// Scales a complex image so every pixel magnitude is at most 1.
void clip_magnitude(Tensor& image);

struct LocalTrainConfig {
  std::size_t epochs = 1;
  std::size_t batch = 8;
  AdamWHyper hyper{1e-3, 0.9, 0.95, 0.05, 1e-8};
};

struct LocalTrainResult {
  ParamSet params;
  std::vector<double> epoch_losses;  // mean total loss per epoch
  std::vector<double> epoch_token_ce;
};

/// Shuffled mini-batch AdamW on loss_prior for one site. `lr_scale`
/// multiplies the configured learning rate (used for round-level schedules).
LocalTrainResult local_train(const ParamSet& start, const TransformerConfig& cfg, std::size_t site,
                             std::span<const vq::TokenPyramid> data, const LocalTrainConfig& train, std::uint64_t seed,
                             double lr_scale = 1.0);

/// Mean token cross-entropy of a parameter set on a set of pyramids.
double mean_token_ce(const ParamSet& params, const TransformerConfig& cfg, std::span<const vq::TokenPyramid> data,
                     std::size_t site);

}  // namespace fedprior::ar
