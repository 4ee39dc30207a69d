#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fedprior/numerics/param_set.hpp"

/// Server/client simulation: broadcast the global parameters, train local
/// copies, aggregate by weighted averaging.
namespace fedprior::fed {

std::vector<ParamSet> broadcast(const ParamSet& global, std::size_t k);

/// Element-wise convex combination sum_k alpha_k theta_k.
///
/// Each element is evaluated as v_min + sum alpha_k (v_k - v_min) over the
/// (value, weight) pairs sorted canonically, so the result does not depend on
/// the order of the sites and identical locals aggregate to themselves exactly.
ParamSet aggregate(const std::vector<ParamSet>& locals, const std::vector<double>& weights);

/// alpha_k = N_k / sum N.
std::vector<double> size_weights(const std::vector<std::size_t>& sizes);

struct FederationConfig {
  std::size_t sites = 3;
  std::size_t rounds = 50;
  std::vector<double> weights;  // empty -> uniform
  std::uint64_t seed = 0;
  std::size_t threads = 1;      // parallel site tasks per round
  void validate() const;
};

struct LocalUpdate {
  ParamSet params;
  std::vector<double> losses;  // one per local epoch
};

/// Trains site `site` starting from `params` in round `round`; must be a pure
/// function of its arguments.
using LocalTrainer = std::function<LocalUpdate(std::size_t site, const ParamSet& params, std::size_t round, std::uint64_t seed)>;

struct RoundLog {
  std::size_t round = 0;
  std::vector<std::vector<double>> site_losses;  // [site][epoch]
  std::vector<double> site_mean_loss;
  std::uint64_t checksum = 0;  // FNV-1a of the serialised aggregate
  double wall_seconds = 0.0;
};

struct FederationResult {
  ParamSet global;
  std::vector<RoundLog> rounds;
};

/// Per-site seeds are derive_seed(config.seed, {round, site}). Results are
/// bit-identical for any thread count.
FederationResult run_federation(const FederationConfig& config, const ParamSet& init, const LocalTrainer& trainer,
                                const std::function<void(const RoundLog&)>& on_round = {});

}  // namespace fedprior::fed
