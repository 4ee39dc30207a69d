#include "fedprior/ar_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedprior/errors.hpp"

namespace fedprior::ar {

using ad::Var;

std::size_t TransformerConfig::tokens() const {
  std::size_t n = 0;
  for (std::size_t p : schedule) n += p * p;
  return n;
}

void TransformerConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) throw ConfigError("prior: d_model must be divisible by heads");
  if (layers == 0) throw ConfigError("prior: need at least one layer");
  if (sites == 0) throw ConfigError("prior: need at least one site");
  if (vocab < 2) throw ConfigError("prior: vocabulary must have at least 2 entries");
  if (schedule.empty()) throw ConfigError("prior: empty scale schedule");
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (schedule[i] <= schedule[i - 1]) throw ConfigError("prior: schedule must be strictly increasing");
  }
  if (!(site_loss_weight >= 0.0)) throw ConfigError("prior: site loss weight must be non-negative");
}

namespace {

void add_adaln(ParamSet& p, const std::string& path, std::size_t d) {
  // Zero-initialised so every AdaLN starts as a plain layer norm.
  p.add(path + "/w", Tensor({d, 2 * d}));
  p.add(path + "/b", Tensor({2 * d}));
}

}  // namespace

ParamSet init_transformer(const TransformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  ParamSet p;
  auto normal = [&](Shape dims, double sd) {
    Tensor t(std::move(dims));
    for (auto& v : t.values()) v = sd * rng.normal();
    return t;
  };
  p.add("site/emb", normal({cfg.sites, d}, 0.5));
  p.add("tok/emb", normal({cfg.vocab, d}, 0.02));
  p.add("start", normal({1, d}, 0.02));
  p.add("pos", normal({cfg.seq_len(), d}, 0.02));
  p.add("sca", normal({cfg.schedule.size() + 1, d}, 0.02));
  const double depth_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "blk" + std::to_string(l);
    add_adaln(p, b + "/ada1", d);
    nn::add_linear(p, b + "/attn/q", d, d, rng);
    nn::add_linear(p, b + "/attn/k", d, d, rng);
    nn::add_linear(p, b + "/attn/v", d, d, rng);
    nn::add_linear(p, b + "/attn/o", d, d, rng, depth_gain);
    add_adaln(p, b + "/ada2", d);
    nn::add_linear(p, b + "/ffn/1", d, cfg.ffn_mult * d, rng);
    nn::add_linear(p, b + "/ffn/2", cfg.ffn_mult * d, d, rng, depth_gain);
  }
  add_adaln(p, "head/ada", d);
  nn::add_linear(p, "head/out", d, cfg.vocab, rng, 0.1);
  nn::add_linear(p, "probe", d, cfg.sites, rng, 0.1);
  return p;
}

std::vector<std::size_t> scale_ids(const TransformerConfig& cfg) {
  std::vector<std::size_t> ids{0};
  for (std::size_t s = 0; s < cfg.schedule.size(); ++s) ids.insert(ids.end(), cfg.schedule[s] * cfg.schedule[s], s + 1);
  return ids;
}

std::vector<std::uint8_t> scale_mask(const TransformerConfig& cfg) {
  const auto ids = scale_ids(cfg);
  const std::size_t n = ids.size();
  std::vector<std::uint8_t> m(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = ids[j] <= ids[i] ? 1 : 0;
  }
  return m;
}

Var build_input(const nn::Bound& p, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site,
                const Tensor* start_noise) {
  if (f.schedule != cfg.schedule) throw ShapeError("prior: pyramid schedule does not match the model");
  if (site >= cfg.sites) throw IndexError("prior: site " + std::to_string(site) + " out of range");
  f.validate(cfg.vocab);
  ad::Tape& tape = p.tape();
  const std::uint32_t site_idx[] = {static_cast<std::uint32_t>(site)};
  std::vector<Var> rows{ad::gather_rows(p["site/emb"], site_idx)};
  Var start = p["start"];
  if (start_noise) start = ad::add(start, tape.constant(*start_noise));
  rows.push_back(start);
  for (std::size_t s = 1; s < cfg.schedule.size(); ++s) {
    const std::size_t a = cfg.schedule[s - 1], b = cfg.schedule[s];
    const Var prev = ad::gather_rows(p["tok/emb"], f.maps[s - 1]);
    rows.push_back(ad::apply_row_map(prev, nn::bilinear_map(a, a, b, b)));
  }
  const auto ids = scale_ids(cfg);
  std::vector<std::uint32_t> sca(ids.begin(), ids.end());
  return ad::add(ad::add(ad::concat_rows(rows), p["pos"]), ad::gather_rows(p["sca"], sca));
}

Var adaln(const nn::Bound& p, const std::string& path, Var h, Var st) {
  const std::size_t d = h.dims()[1];
  const Var gb = nn::linear(p, path, st);  // [1, 2d]
  const Var gamma = ad::offset(ad::slice_cols(gb, 0, d), 1.0);
  const Var beta = ad::slice_cols(gb, d, 2 * d);
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(h), gamma), beta);
}

Var mhsa(const nn::Bound& p, const TransformerConfig& cfg, const std::string& path, Var h, std::span<const std::uint8_t> mask) {
  const std::size_t d = cfg.d_model, dk = d / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const Var q = nn::linear(p, path + "/q", h);
  const Var k = nn::linear(p, path + "/k", h);
  const Var v = nn::linear(p, path + "/v", h);
  std::vector<Var> outs;
  for (std::size_t head = 0; head < cfg.heads; ++head) {
    const Var qh = ad::l2_normalize_rows(ad::slice_cols(q, head * dk, (head + 1) * dk));
    const Var kh = ad::l2_normalize_rows(ad::slice_cols(k, head * dk, (head + 1) * dk));
    const Var vh = ad::slice_cols(v, head * dk, (head + 1) * dk);
    const Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    outs.push_back(ad::matmul(ad::softmax_rows(scores, mask), vh));
  }
  return nn::linear(p, path + "/o", cfg.heads == 1 ? outs[0] : ad::concat_cols(outs));
}

Forward forward_graph(const nn::Bound& p, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site,
                      const Tensor* start_noise) {
  thread_local std::vector<std::uint8_t> mask;
  thread_local std::vector<std::size_t> mask_key;
  if (mask_key != cfg.schedule) {
    mask = scale_mask(cfg);
    mask_key = cfg.schedule;
  }
  const std::uint32_t site_idx[] = {static_cast<std::uint32_t>(site)};
  const Var st = ad::gather_rows(p["site/emb"], site_idx);
  Forward out;
  out.input = build_input(p, cfg, f, site, start_noise);
  Var h = out.input;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "blk" + std::to_string(l);
    h = ad::add(h, mhsa(p, cfg, b + "/attn", adaln(p, b + "/ada1", h, st), mask));
    const Var ff = nn::linear(p, b + "/ffn/1", adaln(p, b + "/ada2", h, st));
    h = ad::add(h, nn::linear(p, b + "/ffn/2", ad::gelu(ff)));
  }
  const Var hn = adaln(p, "head/ada", h, st);
  out.logits = nn::linear(p, "head/out", ad::slice_rows(hn, 1, cfg.seq_len()));
  out.site_logits = nn::linear(p, "probe", ad::slice_rows(hn, 0, 1));
  return out;
}

Tensor forward(const ParamSet& params, const TransformerConfig& cfg, const vq::TokenPyramid& f, std::size_t site) {
  ad::Tape tape;
  const nn::Bound p(tape, params, false);
  return forward_graph(p, cfg, f, site).logits.value();
}

PriorLoss loss_prior(const nn::Bound& p, const TransformerConfig& cfg, std::span<const vq::TokenPyramid> batch,
                     std::span<const std::size_t> sites) {
  if (batch.empty() || batch.size() != sites.size()) throw ContractError("loss_prior: batch and sites must match and be nonempty");
  PriorLoss out;
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Forward fw = forward_graph(p, cfg, batch[i], sites[i]);
    const auto targets = batch[i].flat();
    const Var tok = ad::cross_entropy(fw.logits, targets);
    const std::uint32_t site_target[] = {static_cast<std::uint32_t>(sites[i])};
    const Var site = ad::cross_entropy(fw.site_logits, site_target);
    out.token_ce += tok.value().item();
    out.site_ce += site.value().item();
    Var li = tok;
    if (cfg.site_loss_weight != 0.0) li = ad::add(tok, ad::scale(site, cfg.site_loss_weight));
    total = i == 0 ? li : ad::add(total, li);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = ad::scale(total, inv);
  out.token_ce *= inv;
  out.site_ce *= inv;
  return out;
}

std::size_t nucleus_size(std::size_t vocab, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("nucleus fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(vocab) - 1e-9));
  return std::clamp<std::size_t>(k, 1, vocab);
}

std::uint32_t sample_nucleus(std::span<const double> logits, double q, Rng& rng) {
  const std::size_t v = logits.size();
  const std::size_t keep = nucleus_size(v, q);
  std::vector<std::uint32_t> order(v);
  std::iota(order.begin(), order.end(), 0u);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(keep), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  const double top = logits[order[0]];
  std::vector<double> w(keep);
  double z = 0.0;
  for (std::size_t i = 0; i < keep; ++i) z += (w[i] = std::exp(logits[order[i]] - top));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < keep; ++i) {
    if (u < w[i]) return order[i];
    u -= w[i];
  }
  return order[keep - 1];
}

std::uint32_t greedy(std::span<const double> logits) {
  return static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

vq::TokenPyramid generate_tokens(const ParamSet& params, const TransformerConfig& cfg, std::size_t site, Rng& rng,
                                 const SampleOptions& opts) {
  vq::TokenPyramid f;
  f.schedule = cfg.schedule;
  for (std::size_t p : cfg.schedule) f.maps.emplace_back(p * p, 0u);
  Tensor noise({1, cfg.d_model});
  const bool noisy = cfg.start_noise_std > 0.0;
  if (noisy) {
    for (auto& v : noise.values()) v = cfg.start_noise_std * rng.normal();
  }
  std::size_t offset = 0;
  for (std::size_t s = 0; s < cfg.schedule.size(); ++s) {
    ad::Tape tape;
    const nn::Bound p(tape, params, false);
    const Tensor logits = forward_graph(p, cfg, f, site, noisy ? &noise : nullptr).logits.value();
    for (std::size_t i = 0; i < f.maps[s].size(); ++i) {
      const std::span<const double> row(logits.data() + (offset + i) * cfg.vocab, cfg.vocab);
      f.maps[s][i] = opts.greedy ? greedy(row) : sample_nucleus(row, opts.keep_fraction, rng);
    }
    offset += f.maps[s].size();
  }
  return f;
}

void clip_magnitude(Tensor& image) {
  const std::size_t n = image.size() / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = std::hypot(image[2 * i], image[2 * i + 1]);
    if (m > 1.0) {
      image[2 * i] /= m;
      image[2 * i + 1] /= m;
    }
  }
}

Generated generate(const PriorModel& prior, std::size_t site, Rng& rng, const SampleOptions& opts) {
  Generated g;
  g.tokens = generate_tokens(prior.params, prior.cfg, site, rng, opts);
  g.image = prior.codec.decode_multiscale(g.tokens);
  clip_magnitude(g.image);
  return g;
}

LocalTrainResult local_train(const ParamSet& start, const TransformerConfig& cfg, std::size_t site,
                             std::span<const vq::TokenPyramid> data, const LocalTrainConfig& train, std::uint64_t seed,
                             double lr_scale) {
  if (data.empty()) throw ConfigError("local training needs a nonempty dataset");
  if (train.epochs == 0 || train.batch == 0) throw ConfigError("local epochs and batch size must be positive");
  LocalTrainResult res;
  res.params = start;
  AdamWState opt;
  AdamWHyper hyper = train.hyper;
  hyper.lr *= lr_scale;
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < train.epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0, tok = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += train.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + train.batch);
      std::vector<vq::TokenPyramid> batch;
      for (std::size_t i = b0; i < b1; ++i) batch.push_back(data[order[i]]);
      const std::vector<std::size_t> sites(batch.size(), site);
      ad::Tape tape;
      const nn::Bound p(tape, res.params, true);
      const PriorLoss loss = loss_prior(p, cfg, batch, sites);
      const double lv = loss.total.value().item();
      if (!std::isfinite(lv)) {
        throw TrainingError("prior loss became non-finite at site " + std::to_string(site) + ", epoch " + std::to_string(e));
      }
      total += lv * static_cast<double>(batch.size());
      tok += loss.token_ce * static_cast<double>(batch.size());
      const ParamSet grads = tape.backward(loss.total);
      adamw_step(res.params, grads, opt, hyper);
    }
    res.epoch_losses.push_back(total / static_cast<double>(data.size()));
    res.epoch_token_ce.push_back(tok / static_cast<double>(data.size()));
  }
  return res;
}

double mean_token_ce(const ParamSet& params, const TransformerConfig& cfg, std::span<const vq::TokenPyramid> data,
                     std::size_t site) {
  double s = 0.0;
  for (const auto& f : data) {
    ad::Tape tape;
    const nn::Bound p(tape, params, false);
    const auto targets = f.flat();
    s += ad::cross_entropy(forward_graph(p, cfg, f, site).logits, targets).value().item();
  }
  return s / static_cast<double>(data.size());
}

}  // namespace fedprior::ar
