#include "fedprior/recon_models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "fedprior/errors.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::recon {

using ad::Var;

std::string family_name(Family f) {
  switch (f) {
    case Family::unrolled:
      return "unrolled";
    case Family::cascade_dc:
      return "cascade-dc";
    case Family::conv_autoencoder:
      return "conv-autoencoder";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "unrolled") return Family::unrolled;
  if (s == "cascade-dc") return Family::cascade_dc;
  if (s == "conv-autoencoder") return Family::conv_autoencoder;
  throw ConfigError("unknown model family '" + s + "'");
}

void ArchSpec::validate() const {
  if (family != Family::conv_autoencoder && cascades == 0) throw ConfigError("cascades must be at least 1");
  if (width == 0) throw ConfigError("channel width must be positive");
  if (!(mu_init >= 0.0)) throw ConfigError("mu init must be non-negative");
}

std::string ArchSpec::to_json() const {
  nlohmann::json j{{"family", family_name(family)}, {"cascades", cascades}, {"width", width}, {"mu_init", mu_init}};
  return j.dump(2);
}

ArchSpec ArchSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ArchSpec a;
    a.family = parse_family(j.at("family").get<std::string>());
    a.cascades = j.at("cascades").get<std::size_t>();
    a.width = j.at("width").get<std::size_t>();
    a.mu_init = j.at("mu_init").get<double>();
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad architecture header: ") + e.what(), 0);
  }
}

namespace {

void add_denoiser(ParamSet& p, const std::string& path, std::size_t w, Rng& rng) {
  nn::add_conv(p, path + "/c0", 2, w, rng);
  nn::add_conv(p, path + "/c1", w, w, rng);
  nn::add_conv(p, path + "/c2", w, 2, rng, 0.0);
}

Var denoiser(const nn::Bound& p, const std::string& path, Var x) {
  Var h = ad::gelu(nn::conv(p, path + "/c0", x));
  h = ad::gelu(nn::conv(p, path + "/c1", h));
  return ad::add(x, nn::conv(p, path + "/c2", h));
}

Var soft_weight(const nn::Bound& p, const std::string& path) {
  const Var mu = p[path];
  return ad::mul(mu, ad::reciprocal(ad::offset(mu, 1.0)));
}

Tensor complex_mask(const imaging::Mask& m) {
  const std::size_t n = m.bits.size();
  Tensor c({m.height(), m.width(), 2});
  for (std::size_t i = 0; i < n; ++i) c[2 * i] = m.bits[i];
  c.set_complex(true);
  return c;
}

}  // namespace

ReconModel build_model(const ArchSpec& spec, std::size_t site, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ReconModel m{spec, {}, site};
  const std::size_t w = spec.width;
  auto add_mu = [&](const std::string& path) { m.params.add(path, Tensor({1}, spec.mu_init)); };
  switch (spec.family) {
    case Family::cascade_dc:
      for (std::size_t i = 0; i < spec.cascades; ++i) {
        add_denoiser(m.params, "cascade" + std::to_string(i), w, rng);
        add_mu("mu" + std::to_string(i));
      }
      break;
    case Family::unrolled:
      add_denoiser(m.params, "shared", w, rng);
      for (std::size_t i = 0; i < spec.cascades; ++i) add_mu("mu" + std::to_string(i));
      break;
    case Family::conv_autoencoder:
      nn::add_conv(m.params, "ae/e0", 2, w, rng);
      nn::add_conv(m.params, "ae/e1", w, 2 * w, rng);
      nn::add_conv(m.params, "ae/e2", 2 * w, 2 * w, rng);
      nn::add_conv(m.params, "ae/d0", 2 * w, w, rng);
      nn::add_conv(m.params, "ae/d1", 2 * w, w, rng);
      nn::add_conv(m.params, "ae/out", w, 2, rng, 0.0);
      break;
  }
  return m;
}

imaging::ImagingOperator OperatorPool::draw(std::size_t h, std::size_t w, std::uint64_t index) const {
  if (accelerations.empty()) throw ConfigError("operator pool needs at least one acceleration");
  Rng rng(derive_seed(seed, {index}));
  const double r = accelerations[rng.below(accelerations.size())];
  const std::size_t acs = acs_half_width ? acs_half_width : imaging::default_acs_half_width(h);
  auto coils = ncoils == 1 ? imaging::CoilSet::unit(h, w) : imaging::gen_coils(h, w, ncoils, derive_seed(seed, {~0ULL}));
  return imaging::ImagingOperator(imaging::gen_vd_mask(h, w, r, acs, rng.next_u64()), std::move(coils));
}

Triple make_triple(const Tensor& x_ref, const imaging::ImagingOperator& op) {
  Triple t{x_ref, imaging::forward_op(x_ref, op), {}, op.mask(), op.coils()};
  t.x_us = imaging::adjoint_op(t.y, op);
  return t;
}

std::vector<Triple> make_triples(const std::vector<Tensor>& images, const OperatorPool& pool, std::uint64_t stream) {
  std::vector<Triple> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& x = images[i];
    out.push_back(make_triple(x, pool.draw(x.dim(0), x.dim(1), derive_seed(stream, {i}))));
  }
  return out;
}

std::vector<Triple> synth_site_dataset(const ar::PriorModel& prior, std::size_t source_site, const OperatorPool& pool,
                                       std::size_t n, std::uint64_t seed, const ar::SampleOptions& opts) {
  std::vector<Triple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {i, 0}));
    const Tensor x = ar::generate(prior, source_site, rng, opts).image;
    out.push_back(make_triple(x, pool.draw(x.dim(0), x.dim(1), derive_seed(seed, {i, 1}))));
  }
  return out;
}

void validate_triple(const Triple& t) {
  const auto op = t.op();
  const Tensor y = imaging::forward_op(t.x_ref, op);
  const Tensor xus = imaging::adjoint_op(t.y, op);
  auto rel = [](const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) return std::numeric_limits<double>::infinity();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - b[i]) * (a[i] - b[i]);
      den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
  };
  if (rel(t.y, y) > 1e-10) throw ContractError("triple: k-space does not match its reference under its operator");
  if (rel(t.x_us, xus) > 1e-10) throw ContractError("triple: zero-filled image is not the adjoint of its k-space");
}

Var dc_graph(Var x, const Triple& tr, const Var* t) {
  ad::Tape& tape = *x.tape();
  const Tensor mc = complex_mask(tr.mask);
  const std::size_t nc = tr.coils.ncoils(), h = tr.mask.height(), w = tr.mask.width();
  Var corr;
  for (std::size_t c = 0; c < nc; ++c) {
    const Tensor sens = tr.coils.coil(c);
    const Var k = ad::complex_mul(ad::dft2(ad::complex_mul(x, sens), false), mc);
    Tensor yc({h, w, 2});
    std::copy_n(tr.y.data() + c * h * w * 2, h * w * 2, yc.data());
    const Var r = ad::sub(tape.constant(std::move(yc)), k);
    const Var back = ad::complex_mul(ad::dft2(ad::complex_mul(r, mc), true), sens, true);
    corr = c == 0 ? back : ad::add(corr, back);
  }
  if (t) corr = ad::mul_scalar(corr, *t);
  return ad::add(x, corr);
}

Tensor dc_block(const Tensor& x, const Tensor& y, const imaging::ImagingOperator& op, double mu) {
  if (!(mu >= 0.0)) throw ContractError("dc weight must be non-negative");
  if (std::isinf(mu)) return dc_hard(x, y, op);
  Tensor r = y;
  const Tensor ax = imaging::forward_op(x, op);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ax[i];
  const Tensor corr = imaging::adjoint_op(r, op);
  Tensor out = x;
  const double t = mu / (1.0 + mu);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += t * corr[i];
  return out;
}

Tensor dc_hard(const Tensor& x, const Tensor& y, const imaging::ImagingOperator& op) {
  Tensor r = y;
  const Tensor ax = imaging::forward_op(x, op);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ax[i];
  const Tensor corr = imaging::adjoint_op(r, op);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += corr[i];
  return out;
}

Var forward_graph(const nn::Bound& p, const ArchSpec& spec, const Triple& tr) {
  ad::Tape& tape = p.tape();
  Tensor xin = tr.x_us;
  xin.set_complex(false);
  Var x = tape.constant(std::move(xin));
  switch (spec.family) {
    case Family::cascade_dc:
    case Family::unrolled:
      for (std::size_t i = 0; i < spec.cascades; ++i) {
        x = denoiser(p, spec.family == Family::unrolled ? "shared" : "cascade" + std::to_string(i), x);
        const Var t = soft_weight(p, "mu" + std::to_string(i));
        x = dc_graph(x, tr, &t);
      }
      break;
    case Family::conv_autoencoder: {
      const std::size_t h = tr.mask.height(), w = tr.mask.width();
      const Var e0 = ad::gelu(nn::conv(p, "ae/e0", x));
      Var e = ad::gelu(nn::conv(p, "ae/e1", e0, 2));
      e = ad::gelu(nn::conv(p, "ae/e2", e));
      const std::size_t hh = (h + 1) / 2, wh = (w + 1) / 2;
      Var d = nn::resample(e, nn::bilinear_map(hh, wh, h, w), h, w);
      d = ad::gelu(nn::conv(p, "ae/d0", d));
      // Skip connection from the first encoder stage.
      d = ad::gelu(nn::conv(p, "ae/d1", ad::reshape(ad::concat_cols({ad::reshape(d, {h * w, d.dims()[2]}),
                                                                     ad::reshape(e0, {h * w, e0.dims()[2]})}),
                                                    {h, w, d.dims()[2] + e0.dims()[2]})));
      x = ad::add(x, nn::conv(p, "ae/out", d));
      break;
    }
  }
  return dc_graph(x, tr, nullptr);
}

Tensor forward_recon(const ReconModel& model, const Triple& tr) {
  ad::Tape tape;
  const nn::Bound p(tape, model.params, false);
  Tensor out = forward_graph(p, model.spec, tr).value();
  out.set_complex(true);
  return out;
}

namespace {

void clamp_mu(ParamSet& params) {
  for (auto& [path, t] : params) {
    if (path.rfind("mu", 0) == 0) t[0] = std::max(t[0], 0.0);
  }
}

double train_epoch(ReconModel& model, const std::vector<const Triple*>& pool, const TrainConfig& cfg, AdamWState& opt,
                   Rng& rng) {
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  double total = 0.0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
    const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
    ad::Tape tape;
    const nn::Bound p(tape, model.params, true);
    Var loss;
    for (std::size_t i = b0; i < b1; ++i) {
      const Triple& tr = *pool[order[i]];
      Tensor ref = tr.x_ref;
      ref.set_complex(false);
      const Var li = ad::mse(forward_graph(p, model.spec, tr), tape.constant(std::move(ref)));
      loss = i == b0 ? li : ad::add(loss, li);
    }
    loss = ad::scale(loss, 1.0 / static_cast<double>(b1 - b0));
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw TrainingError("reconstruction loss became non-finite for site " + std::to_string(model.site));
    total += lv * static_cast<double>(b1 - b0);
    adamw_step(model.params, tape.backward(loss), opt, cfg.hyper);
    clamp_mu(model.params);
  }
  return total / static_cast<double>(pool.size());
}

}  // namespace

ReconModel pretrain_local(ReconModel model, const std::vector<Triple>& local, const TrainConfig& cfg, std::uint64_t seed,
                          TrainLog* log) {
  if (local.empty()) throw ConfigError("local training set is empty");
  if (cfg.batch == 0) throw ConfigError("batch size must be positive");
  std::vector<const Triple*> pool;
  for (const auto& t : local) pool.push_back(&t);
  AdamWState opt;
  Rng rng(seed);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double l = train_epoch(model, pool, cfg, opt, rng);
    if (log) log->epoch_loss.push_back(l);
  }
  return model;
}

std::size_t synthetic_source(std::size_t e, std::size_t k, std::size_t k_sites) {
  if (k_sites < 2) throw ConfigError("hybrid fine-tuning needs at least two sites");
  if (k >= k_sites) throw IndexError("site index out of range");
  const std::size_t r = e % (k_sites - 1);
  return r < k ? r : r + 1;
}

ReconModel finetune_hybrid(ReconModel model, const std::vector<Triple>& local,
                           const std::map<std::size_t, std::vector<Triple>>& synthetic, std::size_t k_sites,
                           const TrainConfig& cfg, std::uint64_t seed, TrainLog* log) {
  if (local.empty()) throw ConfigError("local training set is empty");
  for (std::size_t j = 0; j < k_sites; ++j) {
    if (j == model.site) continue;
    const auto it = synthetic.find(j);
    if (it == synthetic.end() || it->second.empty()) {
      throw ConfigError("missing synthetic set from site " + std::to_string(j) + " for site " + std::to_string(model.site));
    }
  }
  AdamWState opt;
  Rng rng(seed);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const std::size_t j = synthetic_source(e, model.site, k_sites);
    std::vector<const Triple*> pool;
    for (const auto& t : local) pool.push_back(&t);
    for (const auto& t : synthetic.at(j)) pool.push_back(&t);
    const double l = train_epoch(model, pool, cfg, opt, rng);
    if (log) {
      log->epoch_loss.push_back(l);
      log->synthetic_source.push_back(j);
    }
  }
  return model;
}

Metrics evaluate(const ReconModel& model, const std::vector<Triple>& test) {
  if (test.empty()) throw ConfigError("evaluation set is empty");
  Metrics m;
  std::vector<double> ps, ss;
  for (const auto& tr : test) {
    const auto op = tr.op();
    const Tensor xh = forward_recon(model, tr);
    m.max_dc_residual = std::max(m.max_dc_residual, imaging::dc_residual(xh, tr.y, op));
    const Tensor a = imaging::magnitude(tr.x_ref), b = imaging::magnitude(xh);
    const double p = imaging::psnr(a, b);
    if (std::isinf(p)) {
      ++m.inf_count;
    } else {
      ps.push_back(p);
    }
    ss.push_back(imaging::ssim(a, b));
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
      mean = sd = 0.0;
      return;
    }
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    sd = std::sqrt(s / static_cast<double>(v.size()));
  };
  stats(ps, m.psnr_mean, m.psnr_std);
  stats(ss, m.ssim_mean, m.ssim_std);
  m.n = test.size();
  return m;
}

std::string metrics_csv_header() {
  return persist::csv_row({"site", "target_site", "R", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n", "inf_count"});
}

std::string metrics_csv_row(std::size_t site, std::size_t target_site, double acceleration, const Metrics& m) {
  using persist::format_double;
  return persist::csv_row({std::to_string(site), std::to_string(target_site), format_double(acceleration),
                           format_double(m.psnr_mean), format_double(m.psnr_std), format_double(m.ssim_mean),
                           format_double(m.ssim_std), std::to_string(m.n), std::to_string(m.inf_count)});
}

void save_model(const ReconModel& model, const std::filesystem::path& stem) {
  nlohmann::json header = nlohmann::json::parse(model.spec.to_json());
  header["site"] = model.site;
  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".fvp";
  persist::write_text(json_path, header.dump(2) + "\n");
  persist::save_paramset(model.params, bin_path);
}

ReconModel load_model(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".fvp";
  const auto bytes = persist::read_file(json_path);
  const std::string text(bytes.begin(), bytes.end());
  ReconModel m;
  m.spec = ArchSpec::from_json(text);
  try {
    m.site = nlohmann::json::parse(text).at("site").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model header: ") + e.what(), 0);
  }
  m.params = persist::load_paramset(bin_path);
  const ReconModel fresh = build_model(m.spec, m.site, 0);
  if (!fresh.params.shape_compatible(m.params)) throw FormatError("model parameters do not match the architecture header", 0);
  return m;
}

}  // namespace fedprior::recon
