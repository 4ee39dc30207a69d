#include "fedprior/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/rng.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::fed {

std::vector<ParamSet> broadcast(const ParamSet& global, std::size_t k) {
  if (k == 0) throw ContractError("broadcast needs at least one site");
  return std::vector<ParamSet>(k, global);
}

std::vector<double> size_weights(const std::vector<std::size_t>& sizes) {
  double total = 0.0;
  for (std::size_t n : sizes) total += static_cast<double>(n);
  if (total <= 0.0) throw ConfigError("site sizes must not all be zero");
  std::vector<double> w;
  for (std::size_t n : sizes) w.push_back(static_cast<double>(n) / total);
  return w;
}

ParamSet aggregate(const std::vector<ParamSet>& locals, const std::vector<double>& weights) {
  if (locals.empty()) throw ContractError("aggregate needs at least one local model");
  if (weights.size() != locals.size()) throw ContractError("aggregate: one weight per local model required");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("aggregate: weights must be non-negative");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-12) throw ContractError("aggregate: weights must sum to 1");
  for (std::size_t k = 1; k < locals.size(); ++k) {
    if (!locals[k].shape_compatible(locals[0])) throw ShapeError("aggregate: local parameter sets are not shape-compatible");
  }
  const std::size_t k_sites = locals.size();
  ParamSet out = locals[0];
  std::vector<std::pair<double, double>> pairs(k_sites);
  for (auto& [path, t] : out) {
    std::vector<const Tensor*> src(k_sites);
    for (std::size_t k = 0; k < k_sites; ++k) src[k] = &locals[k].at(path);
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t k = 0; k < k_sites; ++k) pairs[k] = {(*src[k])[i], weights[k]};
      std::sort(pairs.begin(), pairs.end());
      const double base = pairs[0].first;
      double acc = 0.0;
      for (const auto& [v, w] : pairs) acc += w * (v - base);
      t[i] = base + acc;
    }
  }
  return out;
}

void FederationConfig::validate() const {
  if (sites == 0) throw ConfigError("federation: need at least one site");
  if (rounds == 0) throw ConfigError("federation: rounds must be at least 1");
  if (threads == 0) throw ConfigError("federation: threads must be at least 1");
  if (!weights.empty()) {
    if (weights.size() != sites) throw ConfigError("federation: one weight per site required");
    double s = 0.0;
    for (double w : weights) s += w;
    if (std::abs(s - 1.0) > 1e-12) throw ConfigError("federation: weights must sum to 1");
  }
}

FederationResult run_federation(const FederationConfig& config, const ParamSet& init, const LocalTrainer& trainer,
                                const std::function<void(const RoundLog&)>& on_round) {
  config.validate();
  const std::vector<double> weights =
      config.weights.empty() ? std::vector<double>(config.sites, 1.0 / static_cast<double>(config.sites)) : config.weights;
  FederationResult res;
  res.global = init;
  for (std::size_t round = 0; round < config.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<ParamSet> copies = broadcast(res.global, config.sites);
    std::vector<LocalUpdate> updates(config.sites);
    auto run_site = [&](std::size_t k) {
      updates[k] = trainer(k, copies[k], round, derive_seed(config.seed, {round, k}));
    };
    if (config.threads <= 1 || config.sites == 1) {
      for (std::size_t k = 0; k < config.sites; ++k) run_site(k);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::exception_ptr> errors(config.sites);
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < std::min(config.threads, config.sites); ++t) {
        pool.emplace_back([&] {
          for (std::size_t k = next++; k < config.sites; k = next++) {
            try {
              run_site(k);
            } catch (...) {
              errors[k] = std::current_exception();
            }
          }
        });
      }
      for (auto& th : pool) th.join();
      for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    std::vector<ParamSet> locals;
    RoundLog log;
    log.round = round;
    for (auto& u : updates) {
      double m = 0.0;
      for (double l : u.losses) m += l;
      log.site_mean_loss.push_back(u.losses.empty() ? 0.0 : m / static_cast<double>(u.losses.size()));
      log.site_losses.push_back(std::move(u.losses));
      locals.push_back(std::move(u.params));
    }
    res.global = aggregate(locals, weights);
    log.checksum = persist::fnv1a64(persist::encode_paramset(res.global));
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_round) on_round(log);
    res.rounds.push_back(std::move(log));
  }
  return res;
}

}  // namespace fedprior::fed
