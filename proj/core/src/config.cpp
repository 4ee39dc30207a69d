#include "fedprior/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/rng.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::config {

namespace pt = boost::property_tree;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <class T>
T parse_number(const std::string& raw, const std::string& where) {
  const std::string s = trim(raw);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(where + ": cannot parse '" + raw + "' as a number");
  }
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& raw, const std::string& where) {
  std::vector<T> out;
  if (trim(raw).empty()) return out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(item, where));
  return out;
}

/// Reads the keys of one section and rejects any it did not consume.
class Section {
 public:
  Section(const pt::ptree& node, std::string name) : node_(node), name_(std::move(name)) {}

  template <class T>
  void get(const std::string& key, T& out) {
    const auto raw = find(key);
    if (!raw) return;
    const std::string where = "[" + name_ + "] " + key;
    if constexpr (std::is_same_v<T, std::string>) {
      out = trim(*raw);
    } else if constexpr (std::is_same_v<T, bool>) {
      const std::string v = trim(*raw);
      if (v == "true" || v == "1") {
        out = true;
      } else if (v == "false" || v == "0") {
        out = false;
      } else {
        throw ConfigError(where + ": expected true or false, got '" + v + "'");
      }
    } else if constexpr (requires { typename T::value_type; }) {
      out = parse_list<typename T::value_type>(*raw, where);
    } else {
      out = parse_number<T>(*raw, where);
    }
  }

  void finish() const {
    for (const auto& [key, child] : node_) {
      if (!used_.count(key)) throw ConfigError("unknown key '" + key + "' in [" + name_ + "]");
    }
  }

 private:
  std::optional<std::string> find(const std::string& key) {
    used_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.not_found()) return std::nullopt;
    return it->second.data();
  }

  const pt::ptree& node_;
  std::string name_;
  std::set<std::string> used_;
};

std::string recon_name(std::size_t k) { return "recon.site_" + std::to_string(k); }

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) {
      s += persist::format_double(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

ReconSection default_recon(std::size_t k) {
  ReconSection r;
  switch (k % 3) {
    case 0:
      r.arch = {recon::Family::cascade_dc, 3, 16, 0.05};
      break;
    case 1:
      r.arch = {recon::Family::conv_autoencoder, 1, 16, 0.05};
      break;
    default:
      r.arch = {recon::Family::unrolled, 5, 16, 0.05};
      break;
  }
  return r;
}

void sync_derived(RunConfig& c) {
  c.codec.model.height = c.sites.layout.height;
  c.codec.model.width = c.sites.layout.width;
  c.prior.model.vocab = c.codec.model.vocab;
  c.prior.model.schedule = c.codec.model.schedule;
  c.prior.model.sites = c.sites.count;
}

}  // namespace

RunConfig default_config() {
  RunConfig c;
  for (std::size_t k = 0; k < c.sites.count; ++k) c.recon.push_back(default_recon(k));
  sync_derived(c);
  return c;
}

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("[run] threads must be at least 1");
  const std::size_t k = sites.count;
  if (k < 2) throw ConfigError("[sites] count must be at least 2");
  const auto& l = sites.layout;
  if (l.height == 0 || l.width == 0 || l.n_train == 0 || l.n_test == 0) {
    throw ConfigError("[sites] image size and train/test counts must be positive");
  }
  auto check_len = [&](std::size_t n, const char* key) {
    if (n != 0 && n != k) throw ConfigError(std::string("[sites] ") + key + " needs one value per site");
    if (n == 0 && k > 3) throw ConfigError(std::string("[sites] ") + key + " is required when count exceeds 3");
  };
  check_len(sites.base_intensity.size(), "base_intensity");
  check_len(sites.texture_freq.size(), "texture_freq");
  check_len(sites.polarity.size(), "polarity");
  check_len(sites.min_ellipses.size(), "min_ellipses");
  check_len(sites.max_ellipses.size(), "max_ellipses");
  for (double b : sites.base_intensity) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("[sites] base_intensity values must lie in (0, 1)");
  }
  for (int p : sites.polarity) {
    if (p != 1 && p != -1) throw ConfigError("[sites] polarity values must be 1 or -1");
  }
  codec.model.validate();
  if (codec.train.batch == 0 || codec.aux_images == 0) throw ConfigError("[codec] batch and aux_images must be positive");
  prior.model.validate();
  if (prior.train.batch == 0 || prior.train.epochs == 0) throw ConfigError("[prior] batch and local_epochs must be positive");
  if (!(prior.sampling.keep_fraction > 0.0 && prior.sampling.keep_fraction <= 1.0)) {
    throw ConfigError("[prior] keep_fraction must lie in (0, 1]");
  }
  if (federation.rounds == 0) throw ConfigError("[federation] rounds must be at least 1");
  if (!federation.weights.empty() && federation.weights.size() != k) {
    throw ConfigError("[federation] weights needs one value per site");
  }
  if (recon.size() != k) throw ConfigError("expected one [recon.site_<k>] section per site");
  for (std::size_t i = 0; i < k; ++i) {
    const auto& r = recon[i];
    r.arch.validate();
    if (r.batch == 0) throw ConfigError("[" + recon_name(i) + "] batch must be positive");
    if (r.accelerations.empty()) throw ConfigError("[" + recon_name(i) + "] accelerations must not be empty");
    for (double a : r.accelerations) {
      if (!(a >= 1.0)) throw ConfigError("[" + recon_name(i) + "] accelerations must be at least 1");
    }
  }
  if (eval.accelerations.empty()) throw ConfigError("[eval] accelerations must not be empty");
  for (double a : eval.accelerations) {
    if (!(a >= 1.0)) throw ConfigError("[eval] accelerations must be at least 1");
  }
  if (eval.ncoils == 0) throw ConfigError("[eval] ncoils must be at least 1");
  site_specs(*this);
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax error: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  // The INI reader drops sections without keys, so headers are collected here.
  std::set<std::string> headers;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      line = trim(line);
      if (!line.empty() && line.back() == '\r') line = trim(line.substr(0, line.size() - 1));
      if (line.size() > 2 && line.front() == '[' && line.back() == ']') headers.insert(trim(line.substr(1, line.size() - 2)));
    }
  }
  RunConfig c;
  std::set<std::string> seen;
  const pt::ptree empty;
  auto section = [&](const std::string& name, bool required) -> const pt::ptree* {
    seen.insert(name);
    const auto it = tree.find(name);
    if (it != tree.not_found()) return &it->second;
    if (headers.count(name)) return &empty;
    if (required) throw ConfigError("missing section [" + name + "]");
    return nullptr;
  };

  if (const auto* n = section("run", false)) {
    Section s(*n, "run");
    s.get("seed", c.master_seed);
    s.get("threads", c.threads);
    s.finish();
  }
  {
    Section s(*section("sites", true), "sites");
    auto& st = c.sites;
    s.get("count", st.count);
    s.get("height", st.layout.height);
    s.get("width", st.layout.width);
    s.get("train", st.layout.n_train);
    s.get("val", st.layout.n_val);
    s.get("test", st.layout.n_test);
    s.get("base_intensity", st.base_intensity);
    s.get("texture_freq", st.texture_freq);
    s.get("polarity", st.polarity);
    s.get("min_ellipses", st.min_ellipses);
    s.get("max_ellipses", st.max_ellipses);
    s.finish();
  }
  {
    Section s(*section("codec", true), "codec");
    auto& m = c.codec.model;
    auto& t = c.codec.train;
    s.get("widths", m.widths);
    s.get("latent_channels", m.latent_channels);
    s.get("vocab", m.vocab);
    s.get("schedule", m.schedule);
    s.get("epochs", t.epochs);
    s.get("batch", t.batch);
    s.get("lr", t.hyper.lr);
    s.get("weight_decay", t.hyper.weight_decay);
    s.get("final_lr_fraction", t.final_lr_fraction);
    s.get("ema_decay", t.ema_decay);
    s.get("aux_images", c.codec.aux_images);
    s.finish();
  }
  {
    Section s(*section("prior", true), "prior");
    auto& m = c.prior.model;
    auto& t = c.prior.train;
    s.get("d_model", m.d_model);
    s.get("layers", m.layers);
    s.get("heads", m.heads);
    s.get("ffn_mult", m.ffn_mult);
    s.get("site_loss_weight", m.site_loss_weight);
    s.get("start_noise_std", m.start_noise_std);
    s.get("local_epochs", t.epochs);
    s.get("batch", t.batch);
    s.get("lr", t.hyper.lr);
    s.get("weight_decay", t.hyper.weight_decay);
    s.get("final_lr_fraction", c.prior.final_lr_fraction);
    s.get("keep_fraction", c.prior.sampling.keep_fraction);
    s.get("greedy", c.prior.sampling.greedy);
    s.finish();
  }
  {
    Section s(*section("federation", true), "federation");
    s.get("rounds", c.federation.rounds);
    s.get("weights", c.federation.weights);
    s.finish();
  }
  for (std::size_t k = 0; k < c.sites.count; ++k) {
    const std::string name = recon_name(k);
    ReconSection r = default_recon(k);
    Section s(*section(name, true), name);
    std::string family = recon::family_name(r.arch.family);
    s.get("family", family);
    r.arch.family = recon::parse_family(family);
    s.get("cascades", r.arch.cascades);
    s.get("width", r.arch.width);
    s.get("mu_init", r.arch.mu_init);
    s.get("pretrain_epochs", r.pretrain_epochs);
    s.get("finetune_epochs", r.finetune_epochs);
    s.get("batch", r.batch);
    s.get("lr", r.lr);
    s.get("weight_decay", r.weight_decay);
    s.get("accelerations", r.accelerations);
    s.get("synthetic_count", r.synthetic_count);
    s.finish();
    c.recon.push_back(r);
  }
  {
    Section s(*section("eval", true), "eval");
    s.get("accelerations", c.eval.accelerations);
    s.get("ncoils", c.eval.ncoils);
    s.get("acs_half_width", c.eval.acs_half_width);
    s.finish();
  }
  for (const auto& name : headers) {
    if (!seen.count(name)) throw ConfigError("unknown section [" + name + "]");
  }
  sync_derived(c);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = persist::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string to_ini(const RunConfig& c) {
  using persist::format_double;
  std::ostringstream o;
  o << "[run]\nseed = " << c.master_seed << "\nthreads = " << c.threads << "\n\n";
  const auto& st = c.sites;
  o << "[sites]\ncount = " << st.count << "\nheight = " << st.layout.height << "\nwidth = " << st.layout.width
    << "\ntrain = " << st.layout.n_train << "\nval = " << st.layout.n_val << "\ntest = " << st.layout.n_test
    << "\nbase_intensity = " << join(st.base_intensity) << "\ntexture_freq = " << join(st.texture_freq)
    << "\npolarity = " << join(st.polarity) << "\nmin_ellipses = " << join(st.min_ellipses)
    << "\nmax_ellipses = " << join(st.max_ellipses) << "\n\n";
  const auto& cm = c.codec.model;
  const auto& ct = c.codec.train;
  o << "[codec]\nwidths = " << join(cm.widths) << "\nlatent_channels = " << cm.latent_channels
    << "\nvocab = " << cm.vocab << "\nschedule = " << join(cm.schedule) << "\nepochs = " << ct.epochs
    << "\nbatch = " << ct.batch << "\nlr = " << format_double(ct.hyper.lr)
    << "\nweight_decay = " << format_double(ct.hyper.weight_decay)
    << "\nfinal_lr_fraction = " << format_double(ct.final_lr_fraction)
    << "\nema_decay = " << format_double(ct.ema_decay) << "\naux_images = " << c.codec.aux_images << "\n\n";
  const auto& pm = c.prior.model;
  const auto& ptr = c.prior.train;
  o << "[prior]\nd_model = " << pm.d_model << "\nlayers = " << pm.layers << "\nheads = " << pm.heads
    << "\nffn_mult = " << pm.ffn_mult << "\nsite_loss_weight = " << format_double(pm.site_loss_weight)
    << "\nstart_noise_std = " << format_double(pm.start_noise_std) << "\nlocal_epochs = " << ptr.epochs
    << "\nbatch = " << ptr.batch << "\nlr = " << format_double(ptr.hyper.lr)
    << "\nweight_decay = " << format_double(ptr.hyper.weight_decay)
    << "\nfinal_lr_fraction = " << format_double(c.prior.final_lr_fraction)
    << "\nkeep_fraction = " << format_double(c.prior.sampling.keep_fraction)
    << "\ngreedy = " << (c.prior.sampling.greedy ? "true" : "false") << "\n\n";
  o << "[federation]\nrounds = " << c.federation.rounds << "\nweights = " << join(c.federation.weights) << "\n\n";
  for (std::size_t k = 0; k < c.recon.size(); ++k) {
    const auto& r = c.recon[k];
    o << "[" << recon_name(k) << "]\nfamily = " << recon::family_name(r.arch.family)
      << "\ncascades = " << r.arch.cascades << "\nwidth = " << r.arch.width
      << "\nmu_init = " << format_double(r.arch.mu_init) << "\npretrain_epochs = " << r.pretrain_epochs
      << "\nfinetune_epochs = " << r.finetune_epochs << "\nbatch = " << r.batch << "\nlr = " << format_double(r.lr)
      << "\nweight_decay = " << format_double(r.weight_decay) << "\naccelerations = " << join(r.accelerations)
      << "\nsynthetic_count = " << r.synthetic_count << "\n\n";
  }
  o << "[eval]\naccelerations = " << join(c.eval.accelerations) << "\nncoils = " << c.eval.ncoils
    << "\nacs_half_width = " << c.eval.acs_half_width << "\n";
  return o.str();
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = to_ini(cfg);
  return persist::hex64(persist::fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
}

void apply_seed_override(RunConfig& cfg, const char* value) {
  if (!value) return;
  cfg.master_seed = parse_number<std::uint64_t>(value, "FEDPRIOR_SEED");
}

std::vector<data::SiteSpec> site_specs(const RunConfig& cfg) {
  const auto& st = cfg.sites;
  const auto defaults = data::default_sites(cfg.master_seed);
  std::vector<data::SiteSpec> out;
  for (std::size_t k = 0; k < st.count; ++k) {
    data::SiteSpec s = k < defaults.size() ? defaults[k] : data::SiteSpec{};
    s.index = k;
    s.seed = derive_seed(cfg.master_seed, {0x5173, k});
    if (!st.base_intensity.empty()) s.base_intensity = st.base_intensity[k];
    if (!st.texture_freq.empty()) s.texture_freq = st.texture_freq[k];
    if (!st.polarity.empty()) s.polarity = st.polarity[k];
    if (!st.min_ellipses.empty()) s.min_ellipses = st.min_ellipses[k];
    if (!st.max_ellipses.empty()) s.max_ellipses = st.max_ellipses[k];
    if (s.min_ellipses == 0 || s.min_ellipses > s.max_ellipses) {
      throw ConfigError("[sites] site " + std::to_string(k) + " needs 1 <= min_ellipses <= max_ellipses");
    }
    out.push_back(s);
  }
  return out;
}

namespace {
enum : std::uint64_t { kRecon = 0x2EC0, kOps = 0x0905, kEval = 0xE7A1 };
}

Seeds derive_seeds(std::uint64_t master) {
  Seeds s;
  s.master = master;
  s.split = derive_seed(master, {0x5B17});
  s.aux_images = derive_seed(master, {0xA0});
  s.codec = derive_seed(master, {0xC0DE});
  s.prior_init = derive_seed(master, {0xA1});
  s.federation = derive_seed(master, {0xFED});
  return s;
}

std::uint64_t Seeds::recon_init(std::size_t site) const { return derive_seed(master, {kRecon, site, 0}); }
std::uint64_t Seeds::recon_pretrain(std::size_t site) const { return derive_seed(master, {kRecon, site, 1}); }
std::uint64_t Seeds::recon_finetune(std::size_t site) const { return derive_seed(master, {kRecon, site, 2}); }
std::uint64_t Seeds::synth(std::size_t site, std::size_t source) const {
  return derive_seed(master, {kRecon, site, 3, source});
}
std::uint64_t Seeds::operators(std::size_t site) const { return derive_seed(master, {kOps, site}); }
std::uint64_t Seeds::train_stream(std::size_t site) const { return derive_seed(master, {kRecon, site, 4}); }
std::uint64_t Seeds::eval_stream(std::size_t site, double acceleration) const {
  return derive_seed(master, {kEval, site, static_cast<std::uint64_t>(std::llround(acceleration * 1000.0))});
}

std::string seeds_json(const Seeds& s, std::size_t sites) {
  nlohmann::json j{{"master", s.master},         {"split", s.split},           {"aux_images", s.aux_images},
                   {"codec", s.codec},           {"prior_init", s.prior_init}, {"federation", s.federation}};
  auto& per = j["sites"] = nlohmann::json::array();
  for (std::size_t k = 0; k < sites; ++k) {
    nlohmann::json e{{"site", k},
                     {"recon_init", s.recon_init(k)},
                     {"recon_pretrain", s.recon_pretrain(k)},
                     {"recon_finetune", s.recon_finetune(k)},
                     {"operators", s.operators(k)},
                     {"train_stream", s.train_stream(k)}};
    auto& syn = e["synth"] = nlohmann::json::object();
    for (std::size_t j2 = 0; j2 < sites; ++j2) {
      if (j2 != k) syn[std::to_string(j2)] = s.synth(k, j2);
    }
    per.push_back(e);
  }
  return j.dump(2);
}

}  // namespace fedprior::config
