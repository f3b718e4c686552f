#pragma once

#include "snpe/common.hpp"
#include "snpe/rng.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace snpe {

// -- Gaussian mixtures -----------------------------------------------------

enum class GmVariant { CommonMean, Bimodal };

//! x ~ alpha N(theta, sigma1^2) + (1 - alpha) N(theta, sigma2^2)   (common mean)
//! x ~ alpha N(theta, sigma1^2) + (1 - alpha) N(-theta, sigma1^2)  (bimodal)
struct GmSpec {
  GmVariant variant = GmVariant::CommonMean;
  double alpha = 0.5;
  double sigma1 = 1.0;
  double sigma2 = 0.1;
  Index samples_per_draw = 50;

  void validate() const;
};

Vec simulate_gm(const GmSpec& spec, double theta, Rng& rng);
//! log p(x | theta) for a single draw.
double gm_log_likelihood(const GmSpec& spec, double x, double theta);

// -- Bernoulli GLM ----------------------------------------------------------

//! Bernoulli GLM with a frozen white-noise stimulus. Row i of `design` is
//! v_i = (1, u_i, u_{i-1}, ..., u_{i-d+2}): a bias term followed by the
//! d-1 most recent input samples (zero before the start).
struct GlmSpec {
  Index filter_length = 10;
  Index bins = 100;
  std::uint64_t input_seed = 0;
  Mat design; // bins x filter_length

  static GlmSpec make(Index bins, std::uint64_t input_seed, Index filter_length = 10);
};

inline double logistic(double u) {
  return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

//! Spike vector y with y_i ~ Bern(logistic(v_i . beta)).
Vec simulate_glm(const GlmSpec& spec, const Vec& beta, Rng& rng);
double glm_log_likelihood(const GlmSpec& spec, const Vec& spikes, const Vec& beta);

// -- traces -----------------------------------------------------------------

//! Uniformly sampled single-channel time series plus the stimulus.
struct Trace {
  double dt = 0.0;
  std::string channel = "V";
  Vec signal;
  Vec stimulus;

  Index steps() const { return signal.size(); }
};

struct SimOutput {
  Trace trace;
  bool bad = false;
};

void write_trace_csv(const Trace& trace, const std::filesystem::path& path);
//! Reads the schema written by write_trace_csv: header `time,<channel>,stimulus`.
Trace read_trace_csv(const std::filesystem::path& path);

// -- autapse ----------------------------------------------------------------

//! tau dr/dt = -r + J r + I_inj + sigma eta_t, integrated by Euler-Maruyama.
//! dt <= 0 selects 1e-2 * min(1, |tau|); duration <= 0 selects
//! duration_tau * max(|tau|, 1e-3), so the same number of time constants is
//! simulated at every tau.
struct AutapseSpec {
  double injected = 1.0;
  double noise = 0.5;
  double dt = 0.0;
  double duration = 0.0;
  double duration_tau = 400.0;
  double r0 = 0.0;
  double divergence_bound = 1e6;

  void validate() const;
};

//! theta = (J, tau). Divergence (|r| > bound or non-finite) sets `bad` and
//! stops integration; the trace then ends at the step that diverged.
SimOutput simulate_autapse(const AutapseSpec& spec, const Vec& theta, Rng& rng);

// -- Hodgkin-Huxley -----------------------------------------------------------

enum class StimulusKind { Step, ColouredNoise };

struct HhStimulus {
  StimulusKind kind = StimulusKind::Step;
  double amplitude = 3.0;  // uA/cm^2 (step height, or noise mean)
  double onset = 60.0;     // ms
  double offset = 200.0;   // ms
  double noise_sd = 1.0;   // coloured noise only
  double noise_tau = 5.0;  // ms, coloured noise correlation time
  std::uint64_t noise_seed = 0;
};

//! Single compartment with Na, delayed-rectifier K, slow M-type K and leak
//! currents. Rate functions (V_T = spike threshold parameter):
//!   a_m = 0.32 (V-V_T-13) / (1 - exp(-(V-V_T-13)/4))
//!   b_m = 0.28 (V-V_T-40) / (exp((V-V_T-40)/5) - 1)
//!   a_h = 0.128 exp(-(V-V_T-17)/18)
//!   b_h = 4 / (1 + exp(-(V-V_T-40)/5))
//!   a_n = 0.032 (V-V_T-15) / (1 - exp(-(V-V_T-15)/5))
//!   b_n = k_bn1 exp(-(V-V_T-10)/k_bn2)
//!   p_inf = 1 / (1 + exp(-(V+35)/10))
//!   tau_p = tau_max / (3.3 exp((V+35)/20) + exp(-(V+35)/20))
//! Intrinsic noise enters as a white current sigma * xi / sqrt(dt).
struct HhSpec {
  HhStimulus stimulus;
  double dt = 0.025;        // ms
  double duration = 240.0;  // ms
  double capacitance = 1.0; // uF/cm^2
  double v_init = -70.0;    // mV
  double bad_bound = 500.0; // mV

  void validate() const;
  Index steps() const;
};

inline constexpr int kHhParams = 12;
//! (g_leak, g_Na, g_K, g_M, E_leak, E_Na, E_K, V_T, sigma, k_bn1, k_bn2, tau_max)
const std::array<std::string, kHhParams>& hh_parameter_names();
//! Reference parameter set in natural units.
Vec hh_ground_truth();
//! Signs used to map log-abs parameters back to natural units.
Vec hh_parameter_signs();
Vec hh_to_log_abs(const Vec& natural);
Vec hh_from_log_abs(const Vec& log_abs);

//! Deterministic stimulus waveform for the spec (coloured noise is frozen by
//! its seed).
Vec hh_stimulus(const HhSpec& spec);

//! Exponential-Euler integration; theta is in log-abs space.
SimOutput simulate_hh(const HhSpec& spec, const Vec& log_abs_theta, Rng& rng);

} // namespace snpe
