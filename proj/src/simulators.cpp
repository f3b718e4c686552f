#include "snpe/simulators.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace snpe {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274;

double log_normal(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -kLogSqrt2Pi - std::log(sd) - 0.5 * z * z;
}

double log_add(double a, double b) {
  const double m = std::max(a, b);
  if (!std::isfinite(m))
    return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

} // namespace

// -- Gaussian mixtures -----------------------------------------------------

void GmSpec::validate() const {
  if (!(sigma1 > 0.0) || !(sigma2 > 0.0))
    throw ConfigError("GM model needs sigma1, sigma2 > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("GM model needs alpha in [0, 1]");
  if (samples_per_draw < 1)
    throw ConfigError("GM model needs samples_per_draw >= 1");
}

Vec simulate_gm(const GmSpec& spec, double theta, Rng& rng) {
  Vec x(spec.samples_per_draw);
  for (Index i = 0; i < x.size(); ++i) {
    const bool first = uniform01(rng) < spec.alpha;
    const double eps = standard_normal(rng);
    if (spec.variant == GmVariant::CommonMean)
      x[i] = theta + (first ? spec.sigma1 : spec.sigma2) * eps;
    else
      x[i] = (first ? theta : -theta) + spec.sigma1 * eps;
  }
  return x;
}

double gm_log_likelihood(const GmSpec& spec, double x, double theta) {
  const double la = spec.alpha > 0 ? std::log(spec.alpha)
                                   : -std::numeric_limits<double>::infinity();
  const double lb = spec.alpha < 1 ? std::log1p(-spec.alpha)
                                   : -std::numeric_limits<double>::infinity();
  if (spec.variant == GmVariant::CommonMean)
    return log_add(la + log_normal(x, theta, spec.sigma1),
                   lb + log_normal(x, theta, spec.sigma2));
  return log_add(la + log_normal(x, theta, spec.sigma1),
                 lb + log_normal(x, -theta, spec.sigma1));
}

// -- GLM -------------------------------------------------------------------

GlmSpec GlmSpec::make(Index bins, std::uint64_t input_seed, Index filter_length) {
  if (bins < 1 || filter_length < 1)
    throw ConfigError("GLM needs bins >= 1 and filter_length >= 1");
  GlmSpec s;
  s.bins = bins;
  s.filter_length = filter_length;
  s.input_seed = input_seed;
  Rng rng(input_seed);
  const Vec u = standard_normal_vec(rng, bins);
  s.design = Mat::Zero(bins, filter_length);
  for (Index i = 0; i < bins; ++i) {
    s.design(i, 0) = 1.0;
    for (Index lag = 0; lag + 1 < filter_length; ++lag)
      if (i - lag >= 0)
        s.design(i, lag + 1) = u[i - lag];
  }
  return s;
}

Vec simulate_glm(const GlmSpec& spec, const Vec& beta, Rng& rng) {
  require_dim(beta.size(), spec.filter_length, "simulate_glm");
  const Vec drive = spec.design * beta;
  Vec y(spec.bins);
  for (Index i = 0; i < spec.bins; ++i)
    y[i] = uniform01(rng) < logistic(drive[i]) ? 1.0 : 0.0;
  return y;
}

double glm_log_likelihood(const GlmSpec& spec, const Vec& spikes, const Vec& beta) {
  require_dim(beta.size(), spec.filter_length, "glm_log_likelihood");
  require_dim(spikes.size(), spec.bins, "glm_log_likelihood");
  const Vec drive = spec.design * beta;
  double ll = 0.0;
  for (Index i = 0; i < spec.bins; ++i) {
    // log sigma(u) = -softplus(-u); log(1 - sigma(u)) = -softplus(u)
    const double u = drive[i];
    const double softplus_u = u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
    ll += spikes[i] * u - softplus_u;
  }
  return ll;
}

// -- traces ------------------------------------------------------------------

void write_trace_csv(const Trace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out)
    throw FormatError("cannot write " + path.string());
  out.imbue(std::locale::classic());
  out << std::setprecision(17);
  out << "time," << trace.channel << ",stimulus\n";
  for (Index i = 0; i < trace.steps(); ++i) {
    const double stim = i < trace.stimulus.size() ? trace.stimulus[i] : 0.0;
    out << static_cast<double>(i) * trace.dt << ',' << trace.signal[i] << ',' << stim << '\n';
  }
}

Trace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw FormatError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path.string() + ": empty trace file");
  Trace t;
  {
    std::istringstream hs(line);
    std::string time_col, channel, stim;
    std::getline(hs, time_col, ',');
    std::getline(hs, channel, ',');
    std::getline(hs, stim, ',');
    if (time_col != "time" || channel.empty() || stim != "stimulus")
      throw FormatError(path.string() + ": header must be time,<channel>,stimulus");
    t.channel = channel;
  }
  std::vector<double> time, sig, stim;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty())
      continue;
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    double a, b, c;
    char comma1, comma2;
    if (!(ls >> a >> comma1 >> b >> comma2 >> c) || comma1 != ',' || comma2 != ',')
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    time.push_back(a);
    sig.push_back(b);
    stim.push_back(c);
  }
  if (time.size() < 2)
    throw FormatError(path.string() + ": trace needs at least two samples");
  t.dt = time[1] - time[0];
  if (!(t.dt > 0))
    throw FormatError(path.string() + ": time column must increase");
  for (std::size_t i = 2; i < time.size(); ++i)
    if (std::abs((time[i] - time[i - 1]) - t.dt) > 1e-6 * t.dt + 1e-12)
      throw FormatError(path.string() + ": trace is not uniformly sampled");
  t.signal = Eigen::Map<const Vec>(sig.data(), static_cast<Index>(sig.size()));
  t.stimulus = Eigen::Map<const Vec>(stim.data(), static_cast<Index>(stim.size()));
  return t;
}

// -- autapse -------------------------------------------------------------------

void AutapseSpec::validate() const {
  if (dt < 0.0)
    throw ConfigError("autapse dt must be positive (or 0 for automatic)");
  if (duration < 0.0 || duration_tau <= 0.0)
    throw ConfigError("autapse duration must be positive");
  if (dt > 0.0 && duration > 0.0 && duration <= dt)
    throw ConfigError("autapse duration must exceed dt");
  if (!(divergence_bound > 0.0))
    throw ConfigError("autapse divergence bound must be positive");
  if (noise < 0.0)
    throw ConfigError("autapse noise scale must be non-negative");
}

SimOutput simulate_autapse(const AutapseSpec& spec, const Vec& theta, Rng& rng) {
  require_dim(theta.size(), 2, "simulate_autapse");
  const double coupling = theta[0];
  const double tau = theta[1];
  const double abs_tau = std::max(std::abs(tau), 1e-3);
  const double dt = spec.dt > 0.0 ? spec.dt : 1e-2 * std::min(1.0, abs_tau);
  const double duration = spec.duration > 0.0 ? spec.duration : spec.duration_tau * abs_tau;
  const Index steps = static_cast<Index>(std::llround(duration / dt)) + 1;
  const double tau_eff = tau == 0.0 ? 1e-3 : tau;

  SimOutput out;
  out.trace.dt = dt;
  out.trace.channel = "r";
  out.trace.signal.resize(steps);
  out.trace.stimulus = Vec::Constant(steps, spec.injected);
  double r = spec.r0;
  out.trace.signal[0] = r;
  const double drift_scale = dt / tau_eff;
  const double noise_scale = spec.noise * std::sqrt(dt) / tau_eff;
  for (Index i = 1; i < steps; ++i) {
    r += drift_scale * (-r + coupling * r + spec.injected) +
         noise_scale * standard_normal(rng);
    out.trace.signal[i] = r;
    if (!std::isfinite(r) || std::abs(r) > spec.divergence_bound) {
      out.bad = true;
      out.trace.signal.conservativeResize(i + 1);
      out.trace.stimulus.conservativeResize(i + 1);
      break;
    }
  }
  return out;
}

// -- Hodgkin-Huxley ------------------------------------------------------------

void HhSpec::validate() const {
  if (!(dt > 0.0))
    throw ConfigError("HH dt must be positive");
  if (!(duration > dt))
    throw ConfigError("HH duration must exceed dt");
  if (!(capacitance > 0.0))
    throw ConfigError("HH capacitance must be positive");
  if (stimulus.onset < 0.0 || stimulus.offset < stimulus.onset)
    throw ConfigError("HH stimulus needs 0 <= onset <= offset");
}

Index HhSpec::steps() const { return static_cast<Index>(std::llround(duration / dt)) + 1; }

const std::array<std::string, kHhParams>& hh_parameter_names() {
  static const std::array<std::string, kHhParams> names = {
      "g_leak", "g_Na", "g_K", "g_M", "E_leak", "E_Na",
      "E_K", "V_T", "sigma", "k_bn1", "k_bn2", "tau_max"};
  return names;
}

Vec hh_ground_truth() {
  Vec t(kHhParams);
  t << 0.1, 50.0, 5.0, 0.07, -70.0, 53.0, -107.0, -60.0, 0.1, 0.5, 40.0, 600.0;
  return t;
}

Vec hh_parameter_signs() { return hh_ground_truth().array().sign(); }

Vec hh_to_log_abs(const Vec& natural) { return natural.array().abs().log(); }

Vec hh_from_log_abs(const Vec& log_abs) {
  return hh_parameter_signs().cwiseProduct(log_abs.array().exp().matrix());
}

Vec hh_stimulus(const HhSpec& spec) {
  const Index n = spec.steps();
  Vec stim = Vec::Zero(n);
  const auto& s = spec.stimulus;
  Rng rng(s.noise_seed);
  double ou = 0.0;
  const double decay = std::exp(-spec.dt / s.noise_tau);
  const double kick = s.noise_sd * std::sqrt(1.0 - decay * decay);
  for (Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * spec.dt;
    if (t < s.onset || t >= s.offset)
      continue;
    if (s.kind == StimulusKind::Step) {
      stim[i] = s.amplitude;
    } else {
      ou = decay * ou + kick * standard_normal(rng);
      stim[i] = s.amplitude + ou;
    }
  }
  return stim;
}

namespace {

// z / (exp(z) - 1), continuous at 0
double efun(double z) {
  if (std::abs(z) < 1e-4)
    return 1.0 - 0.5 * z;
  return z / std::expm1(z);
}

struct GateRates {
  double inf;
  double tau;
};

} // namespace

SimOutput simulate_hh(const HhSpec& spec, const Vec& log_abs_theta, Rng& rng) {
  require_dim(log_abs_theta.size(), kHhParams, "simulate_hh");
  const Vec p = hh_from_log_abs(log_abs_theta);
  const double g_leak = p[0], g_na = p[1], g_k = p[2], g_m = p[3];
  const double e_leak = p[4], e_na = p[5], e_k = p[6], v_t = p[7];
  const double sigma = p[8], k_bn1 = p[9], k_bn2 = p[10], tau_max = p[11];

  const double dt = spec.dt;
  const Index n = spec.steps();
  SimOutput out;
  out.trace.dt = dt;
  out.trace.channel = "V";
  out.trace.stimulus = hh_stimulus(spec);
  out.trace.signal.resize(n);

  auto m_rates = [&](double v) {
    const double a = 0.32 * efun(-0.25 * (v - v_t - 13.0)) / 0.25;
    const double b = 0.28 * efun(0.2 * (v - v_t - 40.0)) / 0.2;
    return GateRates{a / (a + b), 1.0 / (a + b)};
  };
  auto h_rates = [&](double v) {
    const double a = 0.128 * std::exp(-(v - v_t - 17.0) / 18.0);
    const double b = 4.0 / (1.0 + std::exp(-(v - v_t - 40.0) / 5.0));
    return GateRates{a / (a + b), 1.0 / (a + b)};
  };
  auto n_rates = [&](double v) {
    const double a = 0.032 * efun(-0.2 * (v - v_t - 15.0)) / 0.2;
    const double b = k_bn1 * std::exp(-(v - v_t - 10.0) / k_bn2);
    return GateRates{a / (a + b), 1.0 / (a + b)};
  };
  auto p_rates = [&](double v) {
    const double inf = 1.0 / (1.0 + std::exp(-(v + 35.0) / 10.0));
    const double tau = tau_max / (3.3 * std::exp((v + 35.0) / 20.0) + std::exp(-(v + 35.0) / 20.0));
    return GateRates{inf, tau};
  };
  auto relax = [dt](double x, const GateRates& r) {
    return r.inf + (x - r.inf) * std::exp(-dt / r.tau);
  };

  double v = spec.v_init;
  double gm = m_rates(v).inf, gh = h_rates(v).inf, gn = n_rates(v).inf, gp = p_rates(v).inf;
  out.trace.signal[0] = v;
  const double noise_scale = sigma / std::sqrt(dt);
  for (Index i = 1; i < n; ++i) {
    gm = relax(gm, m_rates(v));
    gh = relax(gh, h_rates(v));
    gn = relax(gn, n_rates(v));
    gp = relax(gp, p_rates(v));
    if (!(gm >= 0.0 && gm <= 1.0 && gh >= 0.0 && gh <= 1.0 && gn >= 0.0 && gn <= 1.0 &&
          gp >= 0.0 && gp <= 1.0) &&
        std::isfinite(v))
      throw Error("simulate_hh: gating variable left [0, 1]");

    const double gna_eff = g_na * gm * gm * gm * gh;
    const double gk_eff = g_k * gn * gn * gn * gn;
    const double gm_eff = g_m * gp;
    const double g_total = g_leak + gna_eff + gk_eff + gm_eff;
    const double drive = g_leak * e_leak + gna_eff * e_na + (gk_eff + gm_eff) * e_k +
                         out.trace.stimulus[i - 1] + noise_scale * standard_normal(rng);
    const double v_inf = drive / g_total;
    const double tau_v = spec.capacitance / g_total;
    v = v_inf + (v - v_inf) * std::exp(-dt / tau_v);
    out.trace.signal[i] = v;
    if (!std::isfinite(v) || std::abs(v) > spec.bad_bound) {
      out.bad = true;
      out.trace.signal.tail(n - i - 1).setConstant(std::numeric_limits<double>::quiet_NaN());
      break;
    }
  }
  return out;
}

} // namespace snpe
