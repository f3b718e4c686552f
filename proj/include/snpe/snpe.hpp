#pragma once

#include "snpe/common.hpp"
#include "snpe/densities.hpp"
#include "snpe/features.hpp"
#include "snpe/guard.hpp"
#include "snpe/mdn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace snpe {

//! What one simulator call hands back to the inference loop: summary
//! features (with mask and bad flag) and, for recurrent front ends, the
//! input sequence.
struct Simulation {
  FeatureVector features;
  Mat sequence;
};

//! A simulator bound to its prior, feature map and observed data.
//! `simulate` must be safe to call concurrently; all randomness comes from
//! the seed.
struct Task {
  std::string name;
  std::vector<std::string> theta_names;
  std::vector<std::string> feature_names;
  Distribution prior;
  Observation observed;
  std::optional<Vec> theta_true;
  std::function<Simulation(const Vec& theta, std::uint64_t seed)> simulate;

  Index theta_dim() const { return dim(prior); }
  Index n_features() const { return static_cast<Index>(feature_names.size()); }
};

enum class KernelKind { BinaryBad, Gaussian };

struct CalibrationKernel {
  KernelKind kind = KernelKind::BinaryBad;
  double bandwidth = 1.0; // gaussian kind only
};

//! 0 for bad simulations; otherwise 1 (binary) or exp(-|xs - xo_s|^2 / 2 tau^2)
//! over features observed in both (gaussian). `norm` standardises features.
double kernel_value(const CalibrationKernel& k, const FeatureVector& x, const Observation& xo,
                    const Standardizer& norm);

enum class Method { Snpe, Cdelfi };

struct SnpeConfig {
  Method method = Method::Snpe;
  int rounds = 6;
  Index sims_per_round = 1000;
  MdnArchitecture arch;
  //! round -> number of mixture components from that round on.
  std::map<int, Index> components;
  double weight_precision = 0.01;
  int continuity_start = 3;
  double clip = 0.1;
  AdamConfig adam;
  int epochs = 500;
  Index batch = 100;
  CalibrationKernel kernel;
  bool retain_all_rounds = false;
  bool truncate_to_prior = true;
  bool use_guard = false;
  GuardConfig guard;
  bool effective_prior_weights = false;
  //! Offset noise on the mean biases of an added component.
  double component_noise = 1e-2;
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RoundDiagnostics {
  int round = 0;
  Index simulations = 0;
  Index bad = 0;
  long guard_rejections = 0;
  long support_rejections = 0;
  Index components = 0;
  double ess = 0.0;
  double weight_min = 0.0;
  double weight_max = 0.0;
  std::vector<double> loss_curve;
  double kl_term = 0.0;
  double guard_loss = 0.0;
  double seconds_simulate = 0.0;
  double seconds_train = 0.0;
};

nlohmann::json to_json(const RoundDiagnostics& d);

//! Everything simulated in one round, in draw order.
struct RoundData {
  Mat theta;      // d x N
  Mat x;          // features x N
  Mat mask;       // features x N
  Vec bad;        // 0/1
  Vec iw;         // p(theta) / proposal(theta)
  Vec kernel;
  Vec weight;     // iw * kernel, normalised to mean 1
  std::vector<Mat> sequences;

  Index size() const { return theta.cols(); }
};

struct RoundState {
  int round = 1;
  Distribution proposal;
  //! Trained weight posterior of the previous round.
  std::optional<DiagGaussian> weight_prior;
  std::uint64_t seed = 0;
  std::vector<RoundDiagnostics> diagnostics;
};

struct RoundRecord {
  GaussianMixture posterior;
  RoundDiagnostics diagnostics;
  RoundData data;
};

//! A run in progress. The network is created after the first round's
//! simulations, when feature statistics are known.
struct SnpeRun {
  const Task* task = nullptr;
  SnpeConfig config;
  RoundState state;
  std::optional<Mdn> net;
  std::optional<GuardNet> guard;
  std::vector<RoundData> history; // previous rounds, kept when retaining
  std::vector<GaussianMixture> posteriors;
};

// -- weights and losses ----------------------------------------------------------

//! p(theta) / proposal(theta); 0 outside the prior support.
double importance_weight(const Distribution& prior, const Distribution& proposal, const Vec& theta);
//! Scale to mean 1. Throws AllZeroWeights when nothing is left.
Vec normalise_weights(const Vec& w);
//! Effective sample size (sum w)^2 / sum w^2.
double effective_sample_size(const Vec& w);

//! -(1/N) sum_n iw_n K_n <log q(theta_n | x_n)> + (1/N) KL(pi || pi_prev),
//! with the expectation estimated by one reparameterised draw.
double svi_loss(const Mdn& net, const MdnBatch& batch, const Vec& iw, const Vec& kernel,
                const DiagGaussian& pi_prev, Index n, std::uint64_t seed);

//! The N(0, 1/lambda) prior over dense weights.
DiagGaussian isotropic_weight_prior(const Mdn& net, double precision);

//! theta_std = (theta - prior mean) / prior sd.
Standardizer prior_standardizer(const Distribution& prior);

// -- the loop ----------------------------------------------------------------------------

SnpeRun start_run(const Task& task, const SnpeConfig& config);

//! One pass of propose, simulate, weight, train and extract. Advances the
//! state so that the next proposal is the extracted posterior. Dispatches
//! to cdelfi_round for Method::Cdelfi.
RoundRecord run_round(SnpeRun& run);

//! Unweighted point-estimate MDN with one component, followed by division
//! by the proposal. The next proposal is the corrected Gaussian.
RoundRecord cdelfi_round(SnpeRun& run);

//! Train on `data`, returning the loss curve (mean minibatch loss per epoch)
//! and the final KL term.
struct TrainReport {
  std::vector<double> loss_curve;
  double kl_term = 0.0;
};
TrainReport train_mdn(Mdn& net, const std::vector<const RoundData*>& data,
                      const std::optional<DiagGaussian>& weight_prior, const SnpeConfig& config,
                      std::uint64_t seed);

//! Runs every configured round; `after_round` sees each record before the
//! next round starts.
void run_snpe(SnpeRun& run, const std::function<void(const SnpeRun&, const RoundRecord&)>& after_round = {});

//! Writes posterior.json, diagnostics.json and simulations.csv into `dir`.
void write_round_artifacts(const SnpeRun& run, const RoundRecord& record,
                           const std::filesystem::path& dir);

//! Conditional density at x_o divided by the Gaussian proposal (times the
//! prior). A box proposal is flat and divides out. Throws
//! NonPositivePrecision when the division fails.
Gaussian cdelfi_correction(const GaussianMixture& conditional, const Distribution& proposal,
                           const Distribution& prior);

} // namespace snpe
