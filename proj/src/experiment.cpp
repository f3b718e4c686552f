#include "snpe/experiment.hpp"

#include "snpe/parallel.hpp"

#include <yaml-cpp/yaml.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace snpe {

namespace fs = std::filesystem;

namespace {

// -- YAML helpers -----------------------------------------------------------------------

[[noreturn]] void fail(const YAML::Node& n, const std::string& msg) {
  const YAML::Mark m = n.Mark();
  if (m.is_null())
    throw ConfigError(msg);
  throw ConfigError("line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) +
                    ": " + msg);
}

void allow(const YAML::Node& n, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!n.IsMap())
    fail(n, where + " must be a mapping");
  std::set<std::string> seen;
  for (const auto& kv : n) {
    const std::string k = kv.first.as<std::string>();
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      fail(kv.first, "unknown key '" + k + "' in " + where);
    if (!seen.insert(k).second)
      fail(kv.first, "duplicate key '" + k + "' in " + where);
  }
}

template <class T>
T get(const YAML::Node& parent, const char* key, T fallback) {
  const YAML::Node n = parent[key];
  if (!n)
    return fallback;
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    fail(n, std::string("'") + key + "' has the wrong type");
  }
}

Vec get_vec(const YAML::Node& parent, const char* key) {
  const YAML::Node n = parent[key];
  if (!n.IsSequence())
    fail(n ? n : parent, std::string("'") + key + "' must be a list of numbers");
  Vec v(static_cast<Index>(n.size()));
  for (std::size_t i = 0; i < n.size(); ++i) {
    try {
      v[static_cast<Index>(i)] = n[i].as<double>();
    } catch (const YAML::Exception&) {
      fail(n[i], std::string("'") + key + "' must be a list of numbers");
    }
  }
  return v;
}

double positive(const YAML::Node& parent, const char* key, double fallback) {
  const double v = get(parent, key, fallback);
  if (!(v > 0.0))
    fail(parent[key] ? parent[key] : parent, std::string("'") + key + "' must be positive");
  return v;
}

template <class I>
I at_least(const YAML::Node& parent, const char* key, I fallback, I lo) {
  const I v = get(parent, key, fallback);
  if (v < lo)
    fail(parent[key] ? parent[key] : parent,
         std::string("'") + key + "' must be at least " + std::to_string(lo));
  return v;
}

template <class Spec>
void validated(const YAML::Node& n, const Spec& s) {
  try {
    s.validate();
  } catch (const ConfigError& e) {
    fail(n, e.what());
  }
}

// -- sections ------------------------------------------------------------------------------

void parse_simulator(const YAML::Node& n, ExperimentConfig& c) {
  if (!n)
    throw ConfigError("config has no 'simulator' section");
  if (!n.IsMap())
    fail(n, "'simulator' must be a mapping");
  const std::string kind = get<std::string>(n, "kind", "");
  if (kind == "gm") {
    allow(n, {"kind", "variant", "alpha", "sigma1", "sigma2", "samples_per_draw"}, "simulator");
    c.simulator = SimulatorKind::Gm;
    const std::string v = get<std::string>(n, "variant", "common-mean");
    if (v == "common-mean")
      c.gm.variant = GmVariant::CommonMean;
    else if (v == "bimodal")
      c.gm.variant = GmVariant::Bimodal;
    else
      fail(n["variant"], "variant must be common-mean or bimodal");
    c.gm.alpha = get(n, "alpha", c.gm.alpha);
    c.gm.sigma1 = positive(n, "sigma1", c.gm.sigma1);
    c.gm.sigma2 = positive(n, "sigma2", c.gm.sigma2);
    c.gm.samples_per_draw = at_least<Index>(n, "samples_per_draw", 1, 1);
    validated(n, c.gm);
  } else if (kind == "glm") {
    allow(n, {"kind", "bins", "filter_length", "input_seed"}, "simulator");
    c.simulator = SimulatorKind::Glm;
    c.glm.bins = at_least<Index>(n, "bins", c.glm.bins, 1);
    c.glm.filter_length = at_least<Index>(n, "filter_length", c.glm.filter_length, 3);
    c.glm.input_seed = get<std::uint64_t>(n, "input_seed", c.glm.input_seed);
  } else if (kind == "autapse") {
    allow(n, {"kind", "injected", "noise", "dt", "duration", "duration_tau", "r0", "divergence_bound"},
          "simulator");
    c.simulator = SimulatorKind::Autapse;
    auto& a = c.autapse;
    a.injected = get(n, "injected", a.injected);
    a.noise = get(n, "noise", a.noise);
    a.dt = get(n, "dt", a.dt);
    if (a.dt < 0.0)
      fail(n["dt"], "dt must be positive (or 0 for automatic)");
    a.duration = get(n, "duration", a.duration);
    a.duration_tau = get(n, "duration_tau", a.duration_tau);
    a.r0 = get(n, "r0", a.r0);
    a.divergence_bound = get(n, "divergence_bound", a.divergence_bound);
    validated(n, a);
  } else if (kind == "hh") {
    allow(n, {"kind", "dt", "duration", "capacitance", "v_init", "bad_bound", "stimulus"}, "simulator");
    c.simulator = SimulatorKind::Hh;
    auto& h = c.hh;
    h.dt = positive(n, "dt", h.dt);
    h.duration = positive(n, "duration", h.duration);
    h.capacitance = positive(n, "capacitance", h.capacitance);
    h.v_init = get(n, "v_init", h.v_init);
    h.bad_bound = positive(n, "bad_bound", h.bad_bound);
    if (const YAML::Node s = n["stimulus"]) {
      allow(s, {"kind", "amplitude", "onset", "offset", "noise_sd", "noise_tau", "noise_seed"}, "stimulus");
      const std::string sk = get<std::string>(s, "kind", "step");
      if (sk == "step")
        h.stimulus.kind = StimulusKind::Step;
      else if (sk == "noise")
        h.stimulus.kind = StimulusKind::ColouredNoise;
      else
        fail(s["kind"], "stimulus kind must be step or noise");
      h.stimulus.amplitude = get(s, "amplitude", h.stimulus.amplitude);
      h.stimulus.onset = get(s, "onset", h.stimulus.onset);
      h.stimulus.offset = get(s, "offset", h.stimulus.offset);
      h.stimulus.noise_sd = get(s, "noise_sd", h.stimulus.noise_sd);
      h.stimulus.noise_tau = positive(s, "noise_tau", h.stimulus.noise_tau);
      h.stimulus.noise_seed = get<std::uint64_t>(s, "noise_seed", h.stimulus.noise_seed);
    }
    validated(n, h);
  } else {
    fail(n["kind"] ? n["kind"] : n, "simulator kind must be gm, glm, autapse or hh");
  }
}

void default_prior(ExperimentConfig& c) {
  auto& p = c.prior;
  switch (c.simulator) {
  case SimulatorKind::Gm:
    p.kind = PriorSettings::Kind::Box;
    p.lower = Vec::Constant(1, -10.0);
    p.upper = Vec::Constant(1, 10.0);
    break;
  case SimulatorKind::Glm:
    p.kind = PriorSettings::Kind::Smoothness;
    break;
  case SimulatorKind::Autapse:
    p.kind = PriorSettings::Kind::Box;
    p.lower = Vec(2);
    p.lower << 0.0, -1.0;
    p.upper = Vec(2);
    p.upper << 2.0, 2.5;
    break;
  case SimulatorKind::Hh:
    p.kind = PriorSettings::Kind::RelativeBox;
    break;
  }
}

void parse_prior(const YAML::Node& n, ExperimentConfig& c) {
  default_prior(c);
  if (!n)
    return;
  if (!n.IsMap())
    fail(n, "'prior' must be a mapping");
  auto& p = c.prior;
  const std::string kind = get<std::string>(n, "kind", "");
  if (kind == "box") {
    allow(n, {"kind", "lower", "upper"}, "prior");
    p.kind = PriorSettings::Kind::Box;
    p.lower = get_vec(n, "lower");
    p.upper = get_vec(n, "upper");
    if (p.lower.size() != p.upper.size() || !(p.lower.array() < p.upper.array()).all())
      fail(n, "box prior needs lower < upper with matching lengths");
  } else if (kind == "gaussian") {
    allow(n, {"kind", "mean", "sd"}, "prior");
    p.kind = PriorSettings::Kind::Gaussian;
    p.mean = get_vec(n, "mean");
    p.sd = get_vec(n, "sd");
    if (p.mean.size() != p.sd.size() || !(p.sd.array() > 0.0).all())
      fail(n, "gaussian prior needs positive sd with the length of mean");
  } else if (kind == "smoothness") {
    allow(n, {"kind", "sigma", "augmentation"}, "prior");
    p.kind = PriorSettings::Kind::Smoothness;
    p.sigma = positive(n, "sigma", p.sigma);
    const std::string a = get<std::string>(n, "augmentation", "dirichlet");
    if (a == "dirichlet")
      p.augmentation = Augmentation::Dirichlet;
    else if (a == "ridge")
      p.augmentation = Augmentation::Ridge;
    else if (a == "none")
      p.augmentation = Augmentation::None;
    else
      fail(n["augmentation"], "augmentation must be dirichlet, ridge or none");
  } else if (kind == "relative-box") {
    allow(n, {"kind", "low", "high"}, "prior");
    p.kind = PriorSettings::Kind::RelativeBox;
    p.low = positive(n, "low", p.low);
    p.high = positive(n, "high", p.high);
    if (!(p.low < p.high))
      fail(n, "relative-box needs low < high");
  } else {
    fail(n["kind"] ? n["kind"] : n, "prior kind must be box, gaussian, smoothness or relative-box");
  }
}

void parse_snpe(const YAML::Node& n, ExperimentConfig& c) {
  auto& s = c.snpe;
  s.arch.hidden = {50, 50};
  s.arch.impute = c.simulator == SimulatorKind::Hh && c.features.kind == FeatureKind::Hand;
  if (!n)
    return;
  allow(n,
        {"rounds", "simulations", "components", "schedule", "hidden", "activation", "bayesian", "impute",
         "epochs", "batch", "learning_rate", "clip", "weight_precision", "continuity_start", "kernel",
         "retain_all_rounds", "truncate_to_prior", "guard", "component_noise"},
        "snpe");
  s.rounds = at_least(n, "rounds", s.rounds, 1);
  s.sims_per_round = at_least<Index>(n, "simulations", s.sims_per_round, 1);
  s.arch.components = at_least<Index>(n, "components", 1, 1);
  if (const YAML::Node sch = n["schedule"]) {
    if (!sch.IsMap())
      fail(sch, "'schedule' maps rounds to component counts");
    for (const auto& kv : sch) {
      int r = 0;
      Index k = 0;
      try {
        r = kv.first.as<int>();
        k = kv.second.as<Index>();
      } catch (const YAML::Exception&) {
        fail(kv.first, "'schedule' maps rounds to component counts");
      }
      if (r < 2 || k < 1)
        fail(kv.first, "schedule entries need round >= 2 and components >= 1");
      s.components[r] = k;
    }
  }
  if (const YAML::Node h = n["hidden"]) {
    if (!h.IsSequence() || h.size() == 0)
      fail(h, "'hidden' must be a non-empty list of layer widths");
    s.arch.hidden.clear();
    for (const auto& w : h) {
      const Index v = w.as<Index>();
      if (v < 1)
        fail(w, "layer widths must be positive");
      s.arch.hidden.push_back(v);
    }
  }
  if (n["activation"]) {
    try {
      s.arch.activation = activation_from_string(get<std::string>(n, "activation", "tanh"));
    } catch (const Error& e) {
      fail(n["activation"], e.what());
    }
  }
  s.arch.bayesian = get(n, "bayesian", s.arch.bayesian);
  s.arch.impute = get(n, "impute", s.arch.impute);
  s.epochs = at_least(n, "epochs", s.epochs, 0);
  s.batch = at_least<Index>(n, "batch", s.batch, 1);
  s.adam.learning_rate = positive(n, "learning_rate", s.adam.learning_rate);
  s.clip = positive(n, "clip", s.clip);
  s.weight_precision = positive(n, "weight_precision", s.weight_precision);
  s.continuity_start = at_least(n, "continuity_start", s.continuity_start, 1);
  if (const YAML::Node k = n["kernel"]) {
    allow(k, {"kind", "bandwidth"}, "kernel");
    const std::string kk = get<std::string>(k, "kind", "binary");
    if (kk == "binary")
      s.kernel.kind = KernelKind::BinaryBad;
    else if (kk == "gaussian")
      s.kernel.kind = KernelKind::Gaussian;
    else
      fail(k["kind"], "kernel kind must be binary or gaussian");
    s.kernel.bandwidth = positive(k, "bandwidth", s.kernel.bandwidth);
  }
  s.retain_all_rounds = get(n, "retain_all_rounds", s.retain_all_rounds);
  s.truncate_to_prior = get(n, "truncate_to_prior", s.truncate_to_prior);
  s.component_noise = get(n, "component_noise", s.component_noise);
  if (const YAML::Node g = n["guard"]) {
    allow(g, {"enabled", "hidden", "epochs", "batch", "learning_rate", "min_per_class", "effective_prior_weights"},
          "guard");
    s.use_guard = get(g, "enabled", true);
    s.guard.hidden = at_least<Index>(g, "hidden", s.guard.hidden, 1);
    s.guard.epochs = at_least(g, "epochs", s.guard.epochs, 0);
    s.guard.batch = at_least<Index>(g, "batch", s.guard.batch, 1);
    s.guard.adam.learning_rate = positive(g, "learning_rate", s.guard.adam.learning_rate);
    s.guard.min_per_class = at_least<Index>(g, "min_per_class", s.guard.min_per_class, 0);
    s.effective_prior_weights = get(g, "effective_prior_weights", s.effective_prior_weights);
  }
}

} // namespace

// -- parsing -------------------------------------------------------------------------------

ExperimentConfig parse_experiment(const std::string& text, const fs::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("line " + std::to_string(e.mark.line + 1) + ", column " +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  if (!root.IsMap())
    throw ConfigError("config must be a mapping");
  allow(root,
        {"name", "seed", "workers", "output", "simulator", "prior", "observation", "features", "method", "snpe",
         "smc", "mcmc", "rejection"},
        "config");
  ExperimentConfig c;
  c.source = text;
  c.base_dir = base_dir;
  c.name = get<std::string>(root, "name", c.name);
  c.seed = get<std::uint64_t>(root, "seed", c.seed);
  c.workers = at_least(root, "workers", c.workers, 1);
  c.output = get<std::string>(root, "output", "");
  parse_simulator(root["simulator"], c);
  parse_prior(root["prior"], c);

  if (const YAML::Node o = root["observation"]) {
    allow(o, {"theta", "seed", "x", "trace"}, "observation");
    if (o["theta"])
      c.observation.theta = get_vec(o, "theta");
    c.observation.seed = get<std::uint64_t>(o, "seed", c.observation.seed);
    if (o["x"])
      c.observation.x = get_vec(o, "x");
    c.observation.trace = get<std::string>(o, "trace", "");
    if (!c.observation.trace.empty() && c.simulator != SimulatorKind::Hh && c.simulator != SimulatorKind::Autapse)
      fail(o["trace"], "trace import needs a trace simulator (hh or autapse)");
    if (c.observation.x && !c.observation.trace.empty())
      fail(o, "give either x or trace, not both");
  }

  if (const YAML::Node f = root["features"]) {
    allow(f, {"kind", "latency", "gru_units", "stride"}, "features");
    const std::string k = get<std::string>(f, "kind", "hand");
    if (k == "hand")
      c.features.kind = FeatureKind::Hand;
    else if (k == "gru")
      c.features.kind = FeatureKind::Gru;
    else
      fail(f["kind"], "feature kind must be hand or gru");
    c.features.latency = get(f, "latency", c.features.latency);
    c.features.gru_units = at_least<Index>(f, "gru_units", c.features.gru_units, 1);
    c.features.stride = at_least<Index>(f, "stride", c.features.stride, 1);
    if (c.simulator != SimulatorKind::Hh && (c.features.kind == FeatureKind::Gru || c.features.latency))
      fail(f, "gru features and latency are only available for hh");
  }

  const std::string method = get<std::string>(root, "method", "snpe");
  static const std::map<std::string, RunMethod> methods{{"snpe", RunMethod::Snpe},
                                                        {"cdelfi", RunMethod::Cdelfi},
                                                        {"rejection", RunMethod::Rejection},
                                                        {"smc", RunMethod::Smc},
                                                        {"mcmc", RunMethod::Mcmc}};
  if (!methods.count(method))
    fail(root["method"], "method must be snpe, cdelfi, rejection, smc or mcmc");
  c.method = methods.at(method);
  if (c.method == RunMethod::Mcmc && c.simulator != SimulatorKind::Glm)
    fail(root["method"], "the mcmc reference needs the glm simulator");

  parse_snpe(root["snpe"], c);
  c.snpe.method = c.method == RunMethod::Cdelfi ? Method::Cdelfi : Method::Snpe;
  if (c.method == RunMethod::Cdelfi)
    c.snpe.arch.bayesian = false;

  if (const YAML::Node s = root["smc"]) {
    allow(s, {"particles", "eps0", "decay", "max_stages", "budget", "min_acceptance", "kernel_scale"}, "smc");
    c.smc.particles = at_least<Index>(s, "particles", c.smc.particles, 2);
    c.smc.eps0 = positive(s, "eps0", c.smc.eps0);
    c.smc.decay = positive(s, "decay", c.smc.decay);
    if (c.smc.decay >= 1.0)
      fail(s["decay"], "decay must be below 1 so that tolerances decrease");
    c.smc.max_stages = at_least(s, "max_stages", c.smc.max_stages, 1);
    c.smc.budget = at_least<Index>(s, "budget", c.smc.budget, 1);
    c.smc.min_acceptance = get(s, "min_acceptance", c.smc.min_acceptance);
    c.smc.kernel_scale = positive(s, "kernel_scale", c.smc.kernel_scale);
  }
  if (const YAML::Node m = root["mcmc"]) {
    allow(m, {"chains", "burn_in", "samples", "adapt_window", "max_rhat"}, "mcmc");
    c.mcmc.chains = at_least(m, "chains", c.mcmc.chains, 2);
    c.mcmc.burn_in = at_least<Index>(m, "burn_in", c.mcmc.burn_in, 0);
    c.mcmc.samples = at_least<Index>(m, "samples", c.mcmc.samples, 4);
    c.mcmc.adapt_window = at_least<Index>(m, "adapt_window", c.mcmc.adapt_window, 1);
    c.mcmc.max_rhat = positive(m, "max_rhat", c.mcmc.max_rhat);
  }
  if (const YAML::Node r = root["rejection"]) {
    allow(r, {"eps", "simulations"}, "rejection");
    c.rejection.eps = positive(r, "eps", c.rejection.eps);
    c.rejection.simulations = at_least<Index>(r, "simulations", c.rejection.simulations, 1);
  }

  // dimension checks that need the whole file
  const Index d = dim(make_prior(c));
  if (c.observation.theta && c.observation.theta->size() != d)
    fail(root["observation"]["theta"], "observation theta has dimension " +
                                           std::to_string(c.observation.theta->size()) + ", prior has " +
                                           std::to_string(d));
  try {
    c.snpe.validate();
  } catch (const ConfigError& e) {
    fail(root["snpe"] ? root["snpe"] : root, e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  // FNV-1a over the file text and the effective seed
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  };
  feed(cfg.source);
  feed("\nseed=" + std::to_string(cfg.seed));
  return h;
}

// -- tasks ---------------------------------------------------------------------------------

namespace {

Vec glm_reference_beta(Index d) {
  Vec b(d);
  b[0] = -0.5;
  for (Index j = 1; j < d; ++j)
    b[j] = std::sin(M_PI * double(j) / double(d));
  return b;
}

HhFeatureOptions hh_options(const ExperimentConfig& c) {
  HhFeatureOptions o;
  o.onset = c.hh.stimulus.onset;
  o.offset = c.hh.stimulus.offset;
  o.include_latency = c.features.latency;
  return o;
}

std::vector<std::string> numbered(const std::string& stem, Index n) {
  std::vector<std::string> out;
  for (Index i = 0; i < n; ++i)
    out.push_back(stem + std::to_string(i));
  return out;
}

Vec observed_glm_spikes(const ExperimentConfig& c, const GlmSpec& spec) {
  Rng rng(c.observation.seed);
  return simulate_glm(spec, c.observation.theta.value_or(reference_theta(c)), rng);
}

Mat padded_sequence(const Trace& trace, Index stride, Index length) {
  Mat s = trace_to_sequence(trace, stride);
  if (s.cols() == length && s.allFinite())
    return s;
  // broken traces are zero-weighted in training, but the batch still needs a
  // sequence of the common length
  Mat out = Mat::Zero(2, length);
  const Index keep = std::min(length, s.cols());
  out.leftCols(keep) = s.leftCols(keep).unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
  return out;
}

} // namespace

Vec reference_theta(const ExperimentConfig& c) {
  switch (c.simulator) {
  case SimulatorKind::Gm:
    return Vec::Zero(1);
  case SimulatorKind::Glm:
    return glm_reference_beta(c.glm.filter_length);
  case SimulatorKind::Autapse: {
    Vec t(2);
    t << 0.75, 1.0;
    return t;
  }
  case SimulatorKind::Hh:
    return hh_to_log_abs(hh_ground_truth());
  }
  return {};
}

Distribution make_prior(const ExperimentConfig& c) {
  const auto& p = c.prior;
  Index d = 0;
  switch (c.simulator) {
  case SimulatorKind::Gm:
    d = 1;
    break;
  case SimulatorKind::Glm:
    d = c.glm.filter_length;
    break;
  case SimulatorKind::Autapse:
    d = 2;
    break;
  case SimulatorKind::Hh:
    d = kHhParams;
    break;
  }
  switch (p.kind) {
  case PriorSettings::Kind::Box:
    require_dim(p.lower.size(), d, "box prior");
    return BoxUniform(p.lower, p.upper);
  case PriorSettings::Kind::Gaussian:
    require_dim(p.mean.size(), d, "gaussian prior");
    return GaussianMixture(Gaussian{p.mean, Mat(p.sd.asDiagonal())});
  case PriorSettings::Kind::Smoothness:
    return GaussianMixture(glm_smoothness_prior(d, p.sigma, p.augmentation));
  case PriorSettings::Kind::RelativeBox: {
    if (c.simulator != SimulatorKind::Hh)
      throw ConfigError("relative-box priors are defined for hh only");
    // bounds are in log-abs space: |theta*| * [low, high]
    const Vec centre = reference_theta(c);
    return BoxUniform((centre.array() + std::log(p.low)).matrix(), (centre.array() + std::log(p.high)).matrix());
  }
  }
  throw ConfigError("unknown prior");
}

std::optional<Trace> simulate_trace(const ExperimentConfig& c, const Vec& theta, std::uint64_t seed) {
  Rng rng(seed);
  if (c.simulator == SimulatorKind::Autapse)
    return simulate_autapse(c.autapse, theta, rng).trace;
  if (c.simulator == SimulatorKind::Hh)
    return simulate_hh(c.hh, theta, rng).trace;
  return std::nullopt;
}

Task make_task(const ExperimentConfig& c) {
  Task t;
  t.name = c.name;
  t.prior = make_prior(c);
  switch (c.simulator) {
  case SimulatorKind::Gm: {
    const GmSpec spec = c.gm;
    t.theta_names = {"theta"};
    if (spec.samples_per_draw == 1)
      t.feature_names = {"x"};
    else {
      t.feature_names = {"mean", "log_variance"};
      for (int q = 1; q <= 9; ++q)
        t.feature_names.push_back("q" + std::to_string(10 * q));
    }
    t.simulate = [spec](const Vec& theta, std::uint64_t seed) {
      Rng rng(seed);
      return Simulation{gm_features(simulate_gm(spec, theta[0], rng)), Mat()};
    };
    break;
  }
  case SimulatorKind::Glm: {
    const GlmSpec spec = GlmSpec::make(c.glm.bins, c.glm.input_seed, c.glm.filter_length);
    t.theta_names = numbered("beta_", spec.filter_length);
    t.feature_names = numbered("xcorr_", spec.filter_length);
    t.simulate = [spec](const Vec& theta, std::uint64_t seed) {
      Rng rng(seed);
      return Simulation{glm_features(simulate_glm(spec, theta, rng), spec), Mat()};
    };
    break;
  }
  case SimulatorKind::Autapse: {
    const AutapseSpec spec = c.autapse;
    t.theta_names = {"J", "tau"};
    t.feature_names = {"mean_rate"};
    t.simulate = [spec](const Vec& theta, std::uint64_t seed) {
      Rng rng(seed);
      return Simulation{autapse_features(simulate_autapse(spec, theta, rng)), Mat()};
    };
    break;
  }
  case SimulatorKind::Hh: {
    const HhSpec spec = c.hh;
    const HhFeatureOptions opt = hh_options(c);
    const auto& names = hh_parameter_names();
    t.theta_names.assign(names.begin(), names.end());
    t.feature_names = HhFeatureOptions::names(opt);
    const bool gru = c.features.kind == FeatureKind::Gru;
    const Index stride = c.features.stride;
    const Index length = spec.steps() / stride;
    if (gru && length < 1)
      throw ConfigError("gru stride exceeds the trace length");
    t.simulate = [spec, opt, gru, stride, length](const Vec& theta, std::uint64_t seed) {
      Rng rng(seed);
      const SimOutput s = simulate_hh(spec, theta, rng);
      Simulation out{hh_features(s.trace, s.bad, opt), Mat()};
      if (gru)
        out.sequence = padded_sequence(s.trace, stride, length);
      return out;
    };
    break;
  }
  }

  // the observation
  const Index F = t.n_features();
  if (c.observation.x) {
    require_dim(c.observation.x->size(), F, "observed features");
    t.observed = {*c.observation.x, Vec::Zero(F), Mat()};
  } else if (!c.observation.trace.empty()) {
    fs::path p = c.observation.trace;
    if (p.is_relative() && !c.base_dir.empty())
      p = c.base_dir / p;
    const Trace tr = read_trace_csv(p);
    FeatureVector f;
    if (c.simulator == SimulatorKind::Hh)
      f = hh_features(tr, false, hh_options(c));
    else
      f = autapse_features(SimOutput{tr, false});
    t.observed = {f.values, f.mask, Mat()};
    if (c.features.kind == FeatureKind::Gru)
      t.observed.sequence = trace_to_sequence(tr, c.features.stride);
  } else {
    const Vec theta = c.observation.theta.value_or(reference_theta(c));
    const Simulation s = t.simulate(theta, c.observation.seed);
    if (s.features.bad)
      throw Error("the observation simulated at the reference parameters is bad");
    t.observed = {s.features.values, s.features.mask, s.sequence};
    t.theta_true = theta;
  }
  return t;
}

SnpeConfig snpe_settings(const ExperimentConfig& c, const Task& task) {
  SnpeConfig s = c.snpe;
  s.seed = c.seed;
  s.workers = c.workers;
  s.arch.theta_dim = task.theta_dim();
  s.arch.n_features = task.n_features();
  if (c.features.kind == FeatureKind::Gru)
    s.arch.gru = GruShape{2, c.features.gru_units};
  return s;
}

// -- artifacts ---------------------------------------------------------------------------

void write_json_atomic(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out)
      throw FormatError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

GaussianMixture moment_match(const Mat& samples, const Vec& weights, std::vector<std::string> names) {
  const Vec w = weights / weights.sum();
  const Vec mu = samples * w;
  const Mat c = samples.colwise() - mu;
  Mat cov = c * w.asDiagonal() * c.transpose();
  cov += 1e-12 * Mat::Identity(cov.rows(), cov.cols());
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw NonPositivePrecision("sample covariance is not positive definite");
  GaussianMixture g(Gaussian{mu, llt.matrixL()});
  g.names = std::move(names);
  return g;
}

namespace {

void write_samples(const fs::path& path, const std::vector<std::string>& names, const Mat& theta, const Vec& w) {
  std::ofstream out(path);
  out.imbue(std::locale::classic());
  out << std::setprecision(17) << "id";
  for (const auto& n : names)
    out << ',' << n;
  out << ",weight\n";
  for (Index i = 0; i < theta.cols(); ++i) {
    out << i;
    for (Index k = 0; k < theta.rows(); ++k)
      out << ',' << theta(k, i);
    out << ',' << w[i] << '\n';
  }
}

nlohmann::json observation_json(const Task& t) {
  nlohmann::json j;
  j["features"] = t.feature_names;
  j["x"] = std::vector<double>(t.observed.x.data(), t.observed.x.data() + t.observed.x.size());
  j["mask"] = std::vector<double>(t.observed.mask.data(), t.observed.mask.data() + t.observed.mask.size());
  if (t.theta_true)
    j["theta_true"] = std::vector<double>(t.theta_true->data(), t.theta_true->data() + t.theta_true->size());
  j["parameters"] = t.theta_names;
  return j;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const char* method_name(RunMethod m) {
  switch (m) {
  case RunMethod::Snpe:
    return "snpe";
  case RunMethod::Cdelfi:
    return "cdelfi";
  case RunMethod::Rejection:
    return "rejection";
  case RunMethod::Smc:
    return "smc";
  case RunMethod::Mcmc:
    return "mcmc";
  }
  return "?";
}

} // namespace

void cmd_simulate(const ExperimentConfig& cfg, const SimulateRequest& req, const fs::path& out) {
  const Task task = make_task(cfg);
  Mat theta;
  if (req.theta) {
    require_dim(req.theta->size(), task.theta_dim(), "--theta");
    theta = *req.theta;
  } else if (req.prior_draws > 0) {
    Rng rng(derive_seed(cfg.seed, {11}));
    theta = sample(task.prior, req.prior_draws, rng);
  } else {
    theta = cfg.observation.theta.value_or(reference_theta(cfg));
  }
  fs::create_directories(out);
  std::vector<FeatureRow> rows(static_cast<std::size_t>(theta.cols()));
  const bool traces = req.traces && (cfg.simulator == SimulatorKind::Hh || cfg.simulator == SimulatorKind::Autapse);
  parallel_for(rows.size(), cfg.workers, [&](std::size_t i) {
    const Vec th = theta.col(static_cast<Index>(i));
    const std::uint64_t seed = req.theta || req.prior_draws == 0 ? cfg.observation.seed : derive_seed(cfg.seed, {12, i});
    rows[i] = {th, task.simulate(th, seed).features};
    if (traces) {
      std::ostringstream name;
      name << "trace_" << std::setw(4) << std::setfill('0') << i << ".csv";
      write_trace_csv(*simulate_trace(cfg, th, seed), out / name.str());
    }
  });
  write_feature_table(rows, task.theta_names, task.feature_names, out / "features.csv");
}

void cmd_infer(const ExperimentConfig& cfg, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  {
    std::ofstream copy(out / "config.yaml");
    copy << cfg.source;
  }
  nlohmann::json manifest;
  manifest["tool"] = "snpekit";
  manifest["version"] = kVersion;
  manifest["name"] = cfg.name;
  manifest["method"] = method_name(cfg.method);
  manifest["config_hash"] = hex(config_hash(cfg));
  manifest["seeds"] = {{"master", cfg.seed}, {"observation", cfg.observation.seed}};
  manifest["workers"] = cfg.workers;
  manifest["rounds"] = nlohmann::json::array();
  manifest["files"] = {"config.yaml"};

  try {
    const Task task = make_task(cfg);
    write_json_atomic(out / "observation.json", observation_json(task));
    manifest["files"].push_back("observation.json");
    GaussianMixture final_posterior;

    if (cfg.method == RunMethod::Snpe || cfg.method == RunMethod::Cdelfi) {
      SnpeRun run = start_run(task, snpe_settings(cfg, task));
      auto t_round = std::chrono::steady_clock::now();
      run_snpe(run, [&](const SnpeRun& r, const RoundRecord& rec) {
        std::ostringstream dir;
        dir << "round_" << std::setw(2) << std::setfill('0') << rec.diagnostics.round;
        write_round_artifacts(r, rec, out / dir.str());
        manifest["rounds"].push_back({{"round", rec.diagnostics.round},
                                      {"directory", dir.str()},
                                      {"seed", derive_seed(cfg.seed, {std::uint64_t(rec.diagnostics.round)})},
                                      {"seconds", seconds_since(t_round)}});
        t_round = std::chrono::steady_clock::now();
      });
      final_posterior = run.posteriors.back();
      if (run.guard) {
        save_guard(*run.guard, out / "guard.json");
        manifest["files"].push_back("guard.json");
        if (task.theta_dim() == 2) {
          const auto& box = std::get<BoxUniform>(task.prior);
          write_effective_prior_grid(task.prior, *run.guard, 0, 1,
                                     Vec::LinSpaced(81, box.lower[0], box.upper[0]),
                                     Vec::LinSpaced(81, box.lower[1], box.upper[1]), task.theta_names,
                                     out / "effective_prior.csv");
          manifest["files"].push_back("effective_prior.csv");
        }
      }
    } else if (cfg.method == RunMethod::Rejection) {
      const Standardizer norm = pilot_standardizer(task, 1000, derive_seed(cfg.seed, {21}), cfg.workers);
      const AbcSamples s = rejection_abc(task, norm, cfg.rejection.eps, cfg.rejection.simulations,
                                         derive_seed(cfg.seed, {22}), cfg.workers);
      write_samples(out / "samples.csv", task.theta_names, s.theta, Vec::Ones(s.theta.cols()));
      manifest["files"].push_back("samples.csv");
      manifest["acceptance_rate"] = s.acceptance_rate;
      final_posterior = moment_match(s.theta, Vec::Ones(s.theta.cols()), task.theta_names);
    } else if (cfg.method == RunMethod::Smc) {
      SmcConfig sc = cfg.smc;
      sc.workers = cfg.workers;
      const SmcState s = smc_abc(task, sc, cfg.seed);
      write_samples(out / "samples.csv", task.theta_names, s.theta, s.weights);
      nlohmann::json stages = nlohmann::json::array();
      for (const auto& st : s.stages)
        stages.push_back({{"eps", st.eps}, {"simulations", st.simulations}, {"acceptance", st.acceptance}, {"ess", st.ess}});
      write_json_atomic(out / "stages.json", stages);
      manifest["files"].push_back("samples.csv");
      manifest["files"].push_back("stages.json");
      manifest["simulations"] = s.simulations;
      final_posterior = moment_match(s.theta, s.weights, task.theta_names);
    } else {
      const auto& prior = std::get<GaussianMixture>(task.prior);
      if (prior.components() != 1)
        throw ConfigError("the mcmc reference needs a Gaussian prior");
      if (cfg.observation.x || !cfg.observation.trace.empty())
        throw ConfigError("the mcmc reference needs a simulated observation");
      const GlmSpec spec = GlmSpec::make(cfg.glm.bins, cfg.glm.input_seed, cfg.glm.filter_length);
      McmcConfig mc = cfg.mcmc;
      mc.workers = cfg.workers;
      const McmcResult r = glm_reference_mcmc(prior.component(0), spec, observed_glm_spikes(cfg, spec), mc, cfg.seed);
      const Mat pooled = r.pooled();
      write_samples(out / "samples.csv", task.theta_names, pooled, Vec::Ones(pooled.cols()));
      nlohmann::json chains = nlohmann::json::array();
      for (const auto& ch : r.chains)
        chains.push_back({{"acceptance_rate", ch.acceptance_rate}, {"step_size", ch.step_size}});
      const Vec se = r.mean_standard_error();
      write_json_atomic(out / "diagnostics.json",
                        {{"rhat", std::vector<double>(r.rhat.data(), r.rhat.data() + r.rhat.size())},
                         {"mean_standard_error", std::vector<double>(se.data(), se.data() + se.size())},
                         {"chains", chains}});
      manifest["files"].push_back("samples.csv");
      manifest["files"].push_back("diagnostics.json");
      final_posterior = moment_match(pooled, Vec::Ones(pooled.cols()), task.theta_names);
    }

    final_posterior.names = task.theta_names;
    write_json_atomic(out / "posterior.json", to_json(final_posterior));
    manifest["files"].push_back("posterior.json");
    manifest["posterior"] = "posterior.json";
    manifest["status"] = "complete";
    manifest["seconds"] = seconds_since(t0);
    write_json_atomic(out / "manifest.json", manifest);
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["seconds"] = seconds_since(t0);
    write_json_atomic(out / "manifest.json", manifest);
    throw;
  }
}

// -- compare and eval ---------------------------------------------------------------------

namespace {

std::ofstream csv(const fs::path& p) {
  std::ofstream out(p);
  if (!out)
    throw FormatError("cannot write " + p.string());
  out.imbue(std::locale::classic());
  out << std::setprecision(17);
  return out;
}

GaussianMixture read_posterior(const fs::path& p) {
  std::ifstream in(p);
  if (!in)
    throw FormatError("cannot read " + p.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  try {
    return mixture_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

} // namespace

void cmd_compare(const std::vector<fs::path>& runs, const fs::path& out, Index grid_points) {
  if (runs.size() < 2)
    throw IncompatibleRuns("compare needs at least two runs");
  std::vector<GaussianMixture> post;
  std::vector<std::string> labels;
  for (const auto& r : runs) {
    post.push_back(read_posterior(fs::is_directory(r) ? r / "posterior.json" : r));
    std::string label = (fs::is_directory(r) ? r : r.parent_path()).filename().string();
    if (label.empty())
      label = "run" + std::to_string(labels.size());
    labels.push_back(label);
  }
  const Index d = post.front().dim();
  for (std::size_t i = 1; i < post.size(); ++i) {
    if (post[i].dim() != d)
      throw IncompatibleRuns(labels[i] + " has " + std::to_string(post[i].dim()) + " parameters, " + labels[0] +
                             " has " + std::to_string(d));
    if (!post[i].names.empty() && !post[0].names.empty() && post[i].names != post[0].names)
      throw IncompatibleRuns(labels[i] + " names its parameters differently from " + labels[0]);
  }
  std::vector<std::string> names = post[0].names;
  if (names.empty())
    for (Index k = 0; k < d; ++k)
      names.push_back("theta_" + std::to_string(k));

  fs::create_directories(out);
  std::vector<Vec> means;
  std::vector<Mat> covs;
  for (const auto& p : post) {
    means.push_back(mean(Distribution(p)));
    covs.push_back(covariance(Distribution(p)));
  }
  {
    auto f = csv(out / "summary.csv");
    f << "run,parameter,mean,sd\n";
    for (std::size_t r = 0; r < post.size(); ++r)
      for (Index k = 0; k < d; ++k)
        f << labels[r] << ',' << names[k] << ',' << means[r][k] << ',' << std::sqrt(covs[r](k, k)) << '\n';
  }
  {
    auto f = csv(out / "covariance.csv");
    f << "run,row,column,covariance\n";
    for (std::size_t r = 0; r < post.size(); ++r)
      for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < d; ++j)
          f << labels[r] << ',' << names[i] << ',' << names[j] << ',' << covs[r](i, j) << '\n';
  }
  {
    // every run against the first
    auto f = csv(out / "differences.csv");
    f << "run,reference,parameter,mean_difference,difference_in_reference_sd,sd_ratio\n";
    for (std::size_t r = 1; r < post.size(); ++r)
      for (Index k = 0; k < d; ++k) {
        const double sd0 = std::sqrt(covs[0](k, k));
        const double diff = means[r][k] - means[0][k];
        f << labels[r] << ',' << labels[0] << ',' << names[k] << ',' << diff << ',' << diff / sd0 << ','
          << std::sqrt(covs[r](k, k)) / sd0 << '\n';
      }
  }
  // grids cover every run's mean +- 4 sd
  Vec lo = Vec::Constant(d, INFINITY), hi = Vec::Constant(d, -INFINITY);
  for (std::size_t r = 0; r < post.size(); ++r) {
    const Vec sd = covs[r].diagonal().cwiseSqrt();
    lo = lo.cwiseMin(means[r] - 4.0 * sd);
    hi = hi.cwiseMax(means[r] + 4.0 * sd);
  }
  for (Index i = 0; i < d; ++i)
    for (Index j = i + 1; j < d; ++j) {
      auto f = csv(out / ("marginal_" + names[i] + "_" + names[j] + ".csv"));
      f << "run," << names[i] << ',' << names[j] << ",density\n";
      const Vec gi = Vec::LinSpaced(grid_points, lo[i], hi[i]), gj = Vec::LinSpaced(grid_points, lo[j], hi[j]);
      for (std::size_t r = 0; r < post.size(); ++r) {
        const Distribution m = marginal(post[r], {i, j});
        for (Index a = 0; a < grid_points; ++a)
          for (Index b = 0; b < grid_points; ++b) {
            const Vec pt = (Vec(2) << gi[a], gj[b]).finished();
            f << labels[r] << ',' << gi[a] << ',' << gj[b] << ',' << std::exp(log_pdf(m, pt)) << '\n';
          }
      }
    }
}

void cmd_eval(const EvalRequest& req, const fs::path& out) {
  const GaussianMixture post = read_posterior(req.posterior);
  const Distribution dist = post;
  const Index d = post.dim();
  std::vector<std::string> names = post.names;
  if (names.empty())
    for (Index k = 0; k < d; ++k)
      names.push_back("theta_" + std::to_string(k));
  Mat points;
  if (!req.points.empty()) {
    std::ifstream in(req.points);
    if (!in)
      throw FormatError("cannot read " + req.points.string());
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
      if (line.empty())
        continue;
      std::vector<double> row;
      std::istringstream ls(line);
      ls.imbue(std::locale::classic());
      std::string cell;
      while (std::getline(ls, cell, ',')) {
        try {
          row.push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw FormatError(req.points.string() + ": bad number '" + cell + "'");
        }
      }
      if (static_cast<Index>(row.size()) != d)
        throw FormatError(req.points.string() + ": expected " + std::to_string(d) + " columns");
      rows.push_back(row);
    }
    points.resize(d, static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      points.col(static_cast<Index>(i)) = Eigen::Map<const Vec>(rows[i].data(), d);
  } else {
    if (d > 2)
      throw ConfigError("grids are limited to one or two dimensions; pass points instead");
    if (static_cast<Index>(req.lower.size()) != d || static_cast<Index>(req.upper.size()) != d)
      throw ConfigError("grid bounds need one lower and one upper value per dimension");
    if (req.grid_points < 2)
      throw ConfigError("grids need at least two points per axis");
    const Index n = req.grid_points;
    const Vec g0 = Vec::LinSpaced(n, req.lower[0], req.upper[0]);
    if (d == 1) {
      points = g0.transpose();
    } else {
      const Vec g1 = Vec::LinSpaced(n, req.lower[1], req.upper[1]);
      points.resize(2, n * n);
      for (Index a = 0; a < n; ++a)
        for (Index b = 0; b < n; ++b)
          points.col(a * n + b) << g0[a], g1[b];
    }
  }
  auto f = csv(out);
  for (const auto& n : names)
    f << n << ',';
  f << "log_density\n";
  for (Index i = 0; i < points.cols(); ++i) {
    for (Index k = 0; k < d; ++k)
      f << points(k, i) << ',';
    f << log_pdf(dist, points.col(i)) << '\n';
  }
}

} // namespace snpe
