#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fedprior/nn.hpp"
#include "fedprior/numerics/adamw.hpp"
#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/tensor.hpp"

/// Multi-scale residual vector-quantising autoencoder.
///
/// Images are complex [H, W, 2]; the encoder halves the resolution twice to a
/// latent z of [P, P, c] with P = H / 4. Token maps at side lengths
/// p_1 < ... < p_S = P are extracted by repeatedly area-downsampling the
/// residual, quantising against a shared codebook, upsampling the looked-up
/// codes back to P (bilinear) and subtracting them through a 3x3 projection.
namespace fedprior::vq {

struct CodecConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> widths{16, 32, 32};  // feature channels at H, H/2, H/4
  std::size_t latent_channels = 16;
  std::size_t vocab = 128;
  std::vector<std::size_t> schedule{1, 2, 4, 8};

  std::size_t latent_side() const { return height / 4; }
  /// Sum of p_s^2.
  std::size_t token_count() const;
  /// Throws ConfigError on an invalid combination.
  void validate() const;
};

struct TokenPyramid {
  std::vector<std::size_t> schedule;
  std::vector<std::vector<std::uint32_t>> maps;  // row-major p_s x p_s each

  std::size_t total() const;
  /// Scale-major concatenation of all maps.
  std::vector<std::uint32_t> flat() const;
  static TokenPyramid from_flat(const std::vector<std::size_t>& schedule, const std::vector<std::uint32_t>& flat);
  /// Throws ShapeError/IndexError unless map sizes match and indices < vocab.
  void validate(std::size_t vocab) const;

  friend bool operator==(const TokenPyramid&, const TokenPyramid&) = default;
};

/// Nearest codebook row by squared Euclidean distance; ties go to the
/// smallest index. `vectors` is [n, c], `codebook` is [V, c].
std::vector<std::uint32_t> quantize(const Tensor& vectors, const Tensor& codebook);
/// codebook[indices[i], :] as [n, c].
Tensor lookup(const Tensor& codebook, const std::vector<std::uint32_t>& indices);

/// Fresh parameters: He-initialised conv stacks, identity projection and a
/// small random codebook stored under "codebook".
ParamSet init_codec(const CodecConfig& cfg, std::uint64_t seed);

// Differentiable pieces, exposed for training and tests.
ad::Var encoder_graph(const nn::Bound& p, const CodecConfig& cfg, ad::Var x);
ad::Var decoder_graph(const nn::Bound& p, const CodecConfig& cfg, ad::Var z);

class Codec {
 public:
  Codec(CodecConfig cfg, ParamSet params);

  const CodecConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  const Tensor& codebook() const { return params_.at("codebook"); }

  Tensor encode_latent(const Tensor& image) const;

  struct Encoding {
    TokenPyramid tokens;
    Tensor z;         // [P, P, c]
    Tensor z_hat;     // sum of projected code maps
    Tensor residual;  // z - z_hat as left by the loop
    std::vector<Tensor> scale_inputs;  // Down_s(r_s) per scale, [p_s^2, c]
  };
  /// Residual quantisation of a latent.
  Encoding quantize_latent(const Tensor& z) const;
  Encoding encode(const Tensor& image) const { return quantize_latent(encode_latent(image)); }
  TokenPyramid encode_multiscale(const Tensor& image) const { return encode(image).tokens; }

  /// Sum over scales of Proj(Up_P(lookup(f_s))).
  Tensor embed(const TokenPyramid& tokens) const;
  Tensor decode_latent(const Tensor& z_hat) const;
  Tensor decode_multiscale(const TokenPyramid& tokens) const { return decode_latent(embed(tokens)); }

  /// Up_P(lookup(codebook, f_s)) for one scale, as [P, P, c].
  Tensor upsampled_codes(std::size_t scale, const std::vector<std::uint32_t>& indices) const;

 private:
  Tensor project(const Tensor& u) const;

  CodecConfig cfg_;
  ParamSet params_;
  std::vector<ad::RowMap> down_, up_;
};

struct CodecTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 8;
  AdamWHyper hyper{3e-3, 0.9, 0.95, 0.0, 1e-8};
  double final_lr_fraction = 0.05;  // cosine decay target
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
};

struct CodecTrainLog {
  std::vector<double> epoch_loss;
};

/// Pre-trains a codec with loss ||x - x_hat||^2 + ||z - z_hat||^2 (means over
/// elements), a straight-through estimator for the quantiser and an EMA
/// codebook. Unused codes are re-seeded from encountered residuals between
/// epochs. Throws TrainingError on a non-finite loss.
Codec pretrain_codec(const std::vector<Tensor>& images, const CodecConfig& cfg, const CodecTrainConfig& train,
                     CodecTrainLog* log = nullptr, const std::function<void(std::size_t, double)>& on_epoch = {});

/// Mean of ||x - x_hat||^2 + ||z - z_hat||^2 over a set, without training.
double codec_loss(const Codec& codec, const std::vector<Tensor>& images);

/// Exponential-moving-average codebook state.
struct EmaCodebook {
  Tensor counts;  // [V]
  Tensor sums;    // [V, c]

  explicit EmaCodebook(const Tensor& codebook);
  /// Folds in one batch of assignments. Rows with no assignment are left
  /// untouched (codebook row, count and sum).
  void update(Tensor& codebook, const std::vector<std::uint32_t>& idx, const Tensor& vectors, double decay);
  void reseed(Tensor& codebook, std::size_t row, std::span<const double> vector);
};

}  // namespace fedprior::vq
