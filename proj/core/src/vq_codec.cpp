#include "fedprior/vq_codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/rng.hpp"

namespace fedprior::vq {

using ad::Var;

std::size_t CodecConfig::token_count() const {
  std::size_t n = 0;
  for (std::size_t p : schedule) n += p * p;
  return n;
}

void CodecConfig::validate() const {
  if (height != width) throw ConfigError("codec: images must be square");
  if (height < 8 || height % 4 != 0) throw ConfigError("codec: image side must be a multiple of 4 and at least 8");
  if (widths.size() != 3 || std::find(widths.begin(), widths.end(), 0u) != widths.end()) {
    throw ConfigError("codec: widths needs three positive entries");
  }
  if (latent_channels == 0) throw ConfigError("codec: latent channels must be positive");
  if (vocab < 2) throw ConfigError("codec: vocabulary must have at least 2 entries");
  if (schedule.empty()) throw ConfigError("codec: empty scale schedule");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] == 0 || (i > 0 && schedule[i] <= schedule[i - 1])) {
      throw ConfigError("codec: scale schedule must be strictly increasing and positive");
    }
  }
  if (schedule.back() != latent_side()) {
    throw ConfigError("codec: last scale " + std::to_string(schedule.back()) + " must equal latent side " +
                      std::to_string(latent_side()));
  }
}

std::size_t TokenPyramid::total() const {
  std::size_t n = 0;
  for (const auto& m : maps) n += m.size();
  return n;
}

std::vector<std::uint32_t> TokenPyramid::flat() const {
  std::vector<std::uint32_t> out;
  out.reserve(total());
  for (const auto& m : maps) out.insert(out.end(), m.begin(), m.end());
  return out;
}

TokenPyramid TokenPyramid::from_flat(const std::vector<std::size_t>& schedule, const std::vector<std::uint32_t>& flat) {
  TokenPyramid t;
  t.schedule = schedule;
  std::size_t off = 0;
  for (std::size_t p : schedule) {
    if (off + p * p > flat.size()) throw ShapeError("token pyramid: too few tokens for schedule");
    t.maps.emplace_back(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + p * p));
    off += p * p;
  }
  if (off != flat.size()) throw ShapeError("token pyramid: too many tokens for schedule");
  return t;
}

void TokenPyramid::validate(std::size_t vocab) const {
  if (maps.size() != schedule.size()) throw ShapeError("token pyramid: map count does not match schedule");
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (maps[s].size() != schedule[s] * schedule[s]) throw ShapeError("token pyramid: map size does not match scale");
    for (std::uint32_t v : maps[s]) {
      if (v >= vocab) throw IndexError("token " + std::to_string(v) + " outside vocabulary");
    }
  }
}

std::vector<std::uint32_t> quantize(const Tensor& vectors, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ContractError("quantize: empty codebook");
  if (vectors.rank() != 2 || vectors.dim(1) != codebook.dim(1)) {
    throw ShapeError("quantize: vectors " + shape_str(vectors.dims()) + " vs codebook " + shape_str(codebook.dims()));
  }
  const std::size_t n = vectors.dim(0), c = vectors.dim(1), v = codebook.dim(0);
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = vectors.data() + i * c;
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t k = 0; k < v; ++k) {
      const double* e = codebook.data() + k * c;
      double d = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double diff = e[j] - x[j];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(k);
      }
    }
    out[i] = arg;
  }
  return out;
}

Tensor lookup(const Tensor& codebook, const std::vector<std::uint32_t>& indices) {
  const std::size_t v = codebook.dim(0), c = codebook.dim(1);
  Tensor out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) throw IndexError("lookup: token " + std::to_string(indices[i]) + " outside vocabulary");
    std::copy_n(codebook.data() + indices[i] * c, c, out.data() + i * c);
  }
  return out;
}

ParamSet init_codec(const CodecConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet p;
  const auto& w = cfg.widths;
  const std::size_t c = cfg.latent_channels;
  nn::add_conv(p, "enc/in", 2, w[0], rng);
  nn::add_resblock(p, "enc/r0", w[0], rng);
  nn::add_conv(p, "enc/down0", w[0], w[1], rng);
  nn::add_resblock(p, "enc/r1", w[1], rng);
  nn::add_conv(p, "enc/down1", w[1], w[2], rng);
  nn::add_resblock(p, "enc/r2", w[2], rng);
  nn::add_conv(p, "enc/out", w[2], c, rng);
  nn::add_conv(p, "dec/in", c, w[2], rng);
  nn::add_resblock(p, "dec/r2", w[2], rng);
  nn::add_conv(p, "dec/up1", w[2], w[1], rng);
  nn::add_resblock(p, "dec/r1", w[1], rng);
  nn::add_conv(p, "dec/up0", w[1], w[0], rng);
  nn::add_resblock(p, "dec/r0", w[0], rng);
  nn::add_conv(p, "dec/out", w[0], 2, rng);
  Tensor proj({9 * c, c});
  for (std::size_t i = 0; i < c; ++i) proj.at(4 * c + i, i) = 1.0;
  p.add("proj/w", std::move(proj));
  p.add("proj/b", Tensor({c}));
  Tensor cb({cfg.vocab, c});
  for (auto& v : cb.values()) v = 0.1 * rng.normal();
  p.add("codebook", std::move(cb));
  return p;
}

Var encoder_graph(const nn::Bound& p, const CodecConfig&, Var x) {
  Var h = nn::conv(p, "enc/in", x);
  h = nn::resblock(p, "enc/r0", h);
  h = nn::conv(p, "enc/down0", ad::gelu(h), 2);
  h = nn::resblock(p, "enc/r1", h);
  h = nn::conv(p, "enc/down1", ad::gelu(h), 2);
  h = nn::resblock(p, "enc/r2", h);
  return nn::conv(p, "enc/out", ad::gelu(h));
}

Var decoder_graph(const nn::Bound& p, const CodecConfig& cfg, Var z) {
  const std::size_t s2 = cfg.latent_side(), s1 = cfg.height / 2, s0 = cfg.height;
  Var h = nn::conv(p, "dec/in", z);
  h = nn::resblock(p, "dec/r2", h);
  h = nn::resample(h, nn::bilinear_map(s2, s2, s1, s1), s1, s1);
  h = nn::conv(p, "dec/up1", ad::gelu(h));
  h = nn::resblock(p, "dec/r1", h);
  h = nn::resample(h, nn::bilinear_map(s1, s1, s0, s0), s0, s0);
  h = nn::conv(p, "dec/up0", ad::gelu(h));
  h = nn::resblock(p, "dec/r0", h);
  return nn::conv(p, "dec/out", ad::gelu(h));
}

Codec::Codec(CodecConfig cfg, ParamSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const Tensor& cb = params_.at("codebook");
  if (cb.rank() != 2 || cb.dim(0) != cfg_.vocab || cb.dim(1) != cfg_.latent_channels) {
    throw ShapeError("codec: codebook " + shape_str(cb.dims()) + " does not match config");
  }
  if (!cb.all_finite()) throw ContractError("codec: codebook has non-finite rows");
  const std::size_t side = cfg_.latent_side();
  for (std::size_t p : cfg_.schedule) {
    down_.push_back(nn::area_map(side, side, p, p));
    up_.push_back(nn::bilinear_map(p, p, side, side));
  }
}

Tensor Codec::encode_latent(const Tensor& image) const {
  if (image.dims() != Shape{cfg_.height, cfg_.width, 2}) {
    throw ShapeError("codec: expected image [" + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                     ",2], got " + shape_str(image.dims()));
  }
  ad::Tape tape;
  const nn::Bound p(tape, params_, false);
  Tensor x = image;
  x.set_complex(false);
  return encoder_graph(p, cfg_, tape.constant(std::move(x))).value();
}

Tensor Codec::project(const Tensor& u) const {
  ad::Tape tape;
  const Var out = ad::conv3x3(tape.constant(u), tape.constant(params_.at("proj/w")), tape.constant(params_.at("proj/b")));
  return out.value();
}

Tensor Codec::upsampled_codes(std::size_t s, const std::vector<std::uint32_t>& indices) const {
  const std::size_t side = cfg_.latent_side();
  return nn::apply_map(lookup(codebook(), indices), up_.at(s)).reshaped({side, side, cfg_.latent_channels});
}

Codec::Encoding Codec::quantize_latent(const Tensor& z) const {
  const std::size_t side = cfg_.latent_side(), c = cfg_.latent_channels;
  if (z.dims() != Shape{side, side, c}) throw ShapeError("codec: latent " + shape_str(z.dims()) + " does not match schedule");
  Encoding enc;
  enc.tokens.schedule = cfg_.schedule;
  enc.z = z;
  enc.z_hat = Tensor({side, side, c});
  Tensor r = z;
  for (std::size_t s = 0; s < cfg_.schedule.size(); ++s) {
    Tensor d = nn::apply_map(r.reshaped({side * side, c}), down_[s]);
    auto idx = quantize(d, codebook());
    const Tensor pu = project(upsampled_codes(s, idx));
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] -= pu[i];
      enc.z_hat[i] += pu[i];
    }
    enc.scale_inputs.push_back(std::move(d));
    enc.tokens.maps.push_back(std::move(idx));
  }
  enc.residual = std::move(r);
  return enc;
}

Tensor Codec::embed(const TokenPyramid& tokens) const {
  if (tokens.schedule != cfg_.schedule) throw ShapeError("codec: pyramid schedule does not match codec");
  tokens.validate(cfg_.vocab);
  const std::size_t side = cfg_.latent_side();
  Tensor acc({side, side, cfg_.latent_channels});
  for (std::size_t s = 0; s < tokens.maps.size(); ++s) {
    const Tensor pu = project(upsampled_codes(s, tokens.maps[s]));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += pu[i];
  }
  return acc;
}

Tensor Codec::decode_latent(const Tensor& z_hat) const {
  ad::Tape tape;
  const nn::Bound p(tape, params_, false);
  Tensor out = decoder_graph(p, cfg_, tape.constant(z_hat)).value();
  out.set_complex(true);
  return out;
}

EmaCodebook::EmaCodebook(const Tensor& codebook) : counts({codebook.dim(0)}, 1.0), sums(codebook) {}

void EmaCodebook::update(Tensor& codebook, const std::vector<std::uint32_t>& idx, const Tensor& vectors, double decay) {
  const std::size_t v = codebook.dim(0), c = codebook.dim(1);
  std::vector<double> n(v, 0.0);
  Tensor batch_sum({v, c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    n[idx[i]] += 1.0;
    for (std::size_t j = 0; j < c; ++j) batch_sum.at(idx[i], j) += vectors.at(i, j);
  }
  for (std::size_t k = 0; k < v; ++k) {
    if (n[k] == 0.0) continue;
    counts[k] = decay * counts[k] + (1.0 - decay) * n[k];
    for (std::size_t j = 0; j < c; ++j) {
      sums.at(k, j) = decay * sums.at(k, j) + (1.0 - decay) * batch_sum.at(k, j);
      codebook.at(k, j) = sums.at(k, j) / counts[k];
    }
  }
}

void EmaCodebook::reseed(Tensor& codebook, std::size_t row, std::span<const double> vector) {
  const std::size_t c = codebook.dim(1);
  counts[row] = 1.0;
  for (std::size_t j = 0; j < c; ++j) {
    codebook.at(row, j) = vector[j];
    sums.at(row, j) = vector[j];
  }
}

namespace {

ParamSet without_codebook(const ParamSet& p) {
  ParamSet out;
  for (const auto& [path, t] : p) {
    if (path != "codebook") out.add(path, t);
  }
  return out;
}

}  // namespace

double codec_loss(const Codec& codec, const std::vector<Tensor>& images) {
  double total = 0.0;
  for (const auto& x : images) {
    const auto enc = codec.encode(x);
    const Tensor xh = codec.decode_latent(enc.z_hat);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) a += (xh[i] - x[i]) * (xh[i] - x[i]);
    for (std::size_t i = 0; i < enc.z.size(); ++i) b += enc.residual[i] * enc.residual[i];
    total += a / static_cast<double>(x.size()) + b / static_cast<double>(enc.z.size());
  }
  return total / static_cast<double>(images.size());
}

Codec pretrain_codec(const std::vector<Tensor>& images, const CodecConfig& cfg, const CodecTrainConfig& train,
                     CodecTrainLog* log, const std::function<void(std::size_t, double)>& on_epoch) {
  if (images.empty()) throw ConfigError("codec pre-training needs a nonempty auxiliary set");
  if (train.batch == 0) throw ConfigError("codec batch size must be positive");
  cfg.validate();
  ParamSet all = init_codec(cfg, derive_seed(train.seed, {0}));
  Tensor codebook = all.at("codebook");
  ParamSet net = without_codebook(all);
  Rng rng(derive_seed(train.seed, {1}));
  const std::size_t side = cfg.latent_side(), c = cfg.latent_channels;

  // Seed the codebook with pooled latent vectors from a handful of images.
  {
    ParamSet tmp = net;
    tmp.add("codebook", codebook);
    const Codec probe(cfg, tmp);
    std::vector<std::vector<double>> pool;
    for (std::size_t i = 0; i < std::min<std::size_t>(images.size(), 16); ++i) {
      const Tensor z = probe.encode_latent(images[i]).reshaped({side * side, c});
      for (std::size_t p : cfg.schedule) {
        const Tensor d = nn::apply_map(z, nn::area_map(side, side, p, p));
        for (std::size_t r = 0; r < d.dim(0); ++r) pool.emplace_back(d.data() + r * c, d.data() + (r + 1) * c);
      }
    }
    for (std::size_t k = 0; k < cfg.vocab; ++k) {
      const auto& v = pool[rng.below(pool.size())];
      for (std::size_t j = 0; j < c; ++j) codebook.at(k, j) = v[j] + 0.01 * rng.normal();
    }
  }
  EmaCodebook ema(codebook);
  AdamWState opt;

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t total_steps = train.epochs * ((images.size() + train.batch - 1) / train.batch);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<double> usage(cfg.vocab, 0.0);
    std::vector<std::vector<double>> recent;
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += train.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + train.batch);
      ParamSet current = net;
      current.add("codebook", codebook);
      const Codec snapshot(cfg, current);
      ad::Tape tape;
      const nn::Bound p(tape, net, true);
      const Var proj_w = p["proj/w"], proj_b = p["proj/b"];
      std::vector<Var> losses;
      std::vector<std::uint32_t> all_idx;
      std::vector<double> all_vec;
      for (std::size_t bi = b0; bi < b1; ++bi) {
        Tensor xv = images[order[bi]];
        xv.set_complex(false);
        const Var x = tape.constant(xv);
        const Var z = encoder_graph(p, cfg, x);
        const auto enc = snapshot.quantize_latent(z.value());
        Var z_hat;
        for (std::size_t s = 0; s < cfg.schedule.size(); ++s) {
          const Var u = tape.constant(snapshot.upsampled_codes(s, enc.tokens.maps[s]));
          const Var pu = ad::conv3x3(u, proj_w, proj_b);
          z_hat = s == 0 ? pu : ad::add(z_hat, pu);
          all_idx.insert(all_idx.end(), enc.tokens.maps[s].begin(), enc.tokens.maps[s].end());
          const auto& d = enc.scale_inputs[s].storage();
          all_vec.insert(all_vec.end(), d.begin(), d.end());
        }
        const Var x_hat = decoder_graph(p, cfg, ad::straight_through(z, z_hat.value()));
        losses.push_back(ad::add(ad::mse(x_hat, x), ad::mse(z, z_hat)));
      }
      Var loss = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) loss = ad::add(loss, losses[i]);
      loss = ad::scale(loss, 1.0 / static_cast<double>(losses.size()));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw TrainingError("codec loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b0 / train.batch));
      }
      epoch_loss += lv * static_cast<double>(b1 - b0);
      const ParamSet grads = tape.backward(loss);
      AdamWHyper hyper = train.hyper;
      hyper.lr = cosine_lr(train.hyper.lr, train.final_lr_fraction, step++, total_steps);
      adamw_step(net, grads, opt, hyper);

      const Tensor vecs({all_idx.size(), c}, std::move(all_vec));
      ema.update(codebook, all_idx, vecs, train.ema_decay);
      for (std::size_t i = 0; i < all_idx.size(); ++i) usage[all_idx[i]] += 1.0;
      for (std::size_t i = 0; i < std::min<std::size_t>(all_idx.size(), 512); ++i) {
        const std::size_t r = rng.below(all_idx.size());
        recent.emplace_back(vecs.data() + r * c, vecs.data() + (r + 1) * c);
      }
    }
    // Revive codes nobody picked this epoch, except near the end.
    if (epoch + 2 < train.epochs && !recent.empty()) {
      for (std::size_t k = 0; k < cfg.vocab; ++k) {
        if (usage[k] == 0.0) ema.reseed(codebook, k, recent[rng.below(recent.size())]);
      }
    }
    epoch_loss /= static_cast<double>(order.size());
    if (log) log->epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  net.add("codebook", codebook);
  return Codec(cfg, std::move(net));
}

}  // namespace fedprior::vq
