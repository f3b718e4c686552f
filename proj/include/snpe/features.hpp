#pragma once

#include "snpe/common.hpp"
#include "snpe/simulators.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace snpe {

//! Summary statistics x with per-feature missing mask m (1 = missing) and a
//! bad-simulation flag. Missing entries hold the sentinel 0.
struct FeatureVector {
  Vec values;
  Vec mask;
  bool bad = false;

  Index size() const { return values.size(); }
  static FeatureVector all_missing(Index n, bool bad);
};

inline constexpr double kMissingSentinel = 0.0;

struct HhFeatureOptions {
  double onset = 60.0;     // ms
  double offset = 200.0;   // ms
  double spike_threshold = -10.0;
  double refractory = 2.0; // ms
  int lags = 10;           // autocorrelation lags at 1, 2, ... ms
  double lag_spacing = 1.0;
  bool include_latency = false;

  Index size() const { return 2 + lags + 8 + (include_latency ? 1 : 0); }
  static std::vector<std::string> names(const HhFeatureOptions& o);
};

//! Spike count, resting potential, `lags` autocorrelations and the first 8
//! moments of V over the stimulus window (mean, variance, then standardised
//! central moments 3..8); optional latency to first spike.
FeatureVector hh_features(const Trace& trace, bool bad, const HhFeatureOptions& opt);

//! Upward crossings of `threshold` separated by at least `refractory` ms.
std::vector<Index> detect_spikes(const Vec& v, double dt, double threshold, double refractory);

//! (1/T) sum_i y_i v_i: input/spike cross-correlation at each filter lag.
FeatureVector glm_features(const Vec& spikes, const GlmSpec& spec);

//! One draw: the draw itself. Several: mean, log variance and deciles 1..9.
FeatureVector gm_features(const Vec& samples);

//! Time-mean of the rate trace.
FeatureVector autapse_features(const SimOutput& sim);

// -- feature tables -----------------------------------------------------------

inline constexpr int kFeatureTableVersion = 1;

//! CSV: `# snpekit feature table v1`, then header
//! `id,bad,<theta names...>,<feature names...>,<mask_ feature names...>`.
struct FeatureRow {
  Vec theta;
  FeatureVector features;
};
void write_feature_table(const std::vector<FeatureRow>& rows,
                         const std::vector<std::string>& theta_names,
                         const std::vector<std::string>& feature_names,
                         const std::filesystem::path& path);

// -- GRU front end --------------------------------------------------------------

struct GruShape {
  Index inputs = 2;
  Index units = 25;
  Index param_count() const { return 3 * (units * inputs + units * units + units); }
};

//! Activations saved by the forward pass for back-propagation through time.
struct GruTape {
  std::vector<Mat> h;  // h[0] = 0, h[t+1] after step t
  std::vector<Mat> z, r, cand, x;
};

//! Batched many-to-one GRU: `steps[t]` holds inputs (inputs x batch) at time
//! t; returns the final hidden state (units x batch).
//!   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br)
//!   c = tanh(Wc x + Uc (r .* h) + bc), h' = (1 - z) .* h + z .* c
//! Parameters are packed as [Wz Uz bz Wr Ur br Wc Uc bc], column-major.
Mat gru_forward(const GruShape& shape, const double* params,
                const std::vector<Mat>& steps, GruTape* tape = nullptr);

//! Accumulates dLoss/dparams into `grad` given dLoss/dh_T.
void gru_backward(const GruShape& shape, const double* params, const GruTape& tape,
                  const Mat& d_final, double* grad);

//! Single-sequence convenience: `sequence` is inputs x T.
Vec gru_forward(const GruShape& shape, const Vec& params, const Mat& sequence);

//! 2 x T' sequence of block means over `stride` samples: voltage standardised
//! as (V - v_center) / v_scale, stimulus divided by `stimulus_scale`.
Mat trace_to_sequence(const Trace& trace, Index stride, double v_center = -70.0,
                      double v_scale = 25.0, double stimulus_scale = 1.0);

} // namespace snpe
