#pragma once

#include <map>
#include <string>

#include "fedprior/numerics/autodiff.hpp"
#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/rng.hpp"

/// Layer building blocks shared by the codec, the prior and the
/// reconstruction networks.
namespace fedprior::nn {

/// Parameters of a ParamSet bound to a tape, either as trainable leaves or as
/// constants for inference.
class Bound {
 public:
  Bound(ad::Tape& tape, const ParamSet& params, bool trainable);

  ad::Var operator[](const std::string& path) const;
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

/// He-uniform 3x3 conv: <path>/w [9 cin, cout], <path>/b [cout] = 0.
void add_conv(ParamSet& p, const std::string& path, std::size_t cin, std::size_t cout, Rng& rng, double gain = 1.0);
/// Uniform(+-gain/sqrt(in)) linear map: <path>/w [in, out], <path>/b [out] = 0.
void add_linear(ParamSet& p, const std::string& path, std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
/// Two convs; the second is scaled by `gain2` so fresh blocks start near identity.
void add_resblock(ParamSet& p, const std::string& path, std::size_t ch, Rng& rng, double gain2 = 0.1);

ad::Var conv(const Bound& p, const std::string& path, ad::Var x, std::size_t stride = 1);
/// x @ w + b for x [R, in].
ad::Var linear(const Bound& p, const std::string& path, ad::Var x);
/// x + conv2(gelu(conv1(gelu(x)))).
ad::Var resblock(const Bound& p, const std::string& path, ad::Var x);

/// Area-average resampling of an (hin x win) grid to (hout x wout), exact for
/// fractional overlaps.
ad::RowMap area_map(std::size_t hin, std::size_t win, std::size_t hout, std::size_t wout);
/// Bilinear resampling with half-pixel centres and edge clamping.
ad::RowMap bilinear_map(std::size_t hin, std::size_t win, std::size_t hout, std::size_t wout);

/// Applies a RowMap to an [H, W, C] map, returning [hout, wout, C].
ad::Var resample(ad::Var x, const ad::RowMap& map, std::size_t hout, std::size_t wout);
/// Plain (non-differentiable) application of a RowMap to rows of x [N, C].
Tensor apply_map(const Tensor& x, const ad::RowMap& map);

}  // namespace fedprior::nn
