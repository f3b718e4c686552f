#pragma once

#include "snpe/common.hpp"
#include "snpe/densities.hpp"
#include "snpe/mdn.hpp"
#include "snpe/simulators.hpp"
#include "snpe/snpe.hpp"

#include <functional>
#include <vector>

namespace snpe {

// -- rejection ABC ---------------------------------------------------------------

struct AbcSamples {
  Mat theta;     // accepted draws, one per column
  Vec distance;  // their distances to x_o
  Index simulations = 0;
  double acceptance_rate = 0.0;
};

//! Euclidean distance between standardised features; infinite for bad
//! simulations. Entries missing in either vector are skipped.
double abc_distance(const FeatureVector& x, const Observation& xo, const Standardizer& norm);

//! Feature standardisation from `n` prior-predictive simulations.
Standardizer pilot_standardizer(const Task& task, Index n, std::uint64_t seed, int workers = 1);

//! Simulate at `n` prior draws and keep those within `eps` of x_o.
//! Throws NoAcceptances when nothing is kept.
AbcSamples rejection_abc(const Task& task, const Standardizer& norm, double eps, Index n,
                         std::uint64_t seed, int workers = 1);

// -- SMC ABC --------------------------------------------------------------------------

struct SmcConfig {
  Index particles = 1000;
  double eps0 = 15.0;
  double decay = 0.9;     // eps_i = eps0 * decay^i
  int max_stages = 1000;
  Index budget = 25000;   // total simulations, pilot included
  double min_acceptance = 0.01;
  double kernel_scale = 2.0; // perturbation covariance = scale * particle covariance
  int workers = 1;
};

struct SmcStage {
  double eps = 0.0;
  Index simulations = 0;
  double acceptance = 0.0;
  double ess = 0.0;
};

struct SmcState {
  Mat theta;     // particles
  Vec weights;   // on the simplex
  std::vector<SmcStage> stages;
  Index simulations = 0;
  Standardizer norm;

  double tolerance() const { return stages.empty() ? INFINITY : stages.back().eps; }
};

inline double smc_tolerance(const SmcConfig& c, int stage) {
  return c.eps0 * std::pow(c.decay, stage);
}

//! Population Monte Carlo ABC. Stage 0 is rejection sampling from the prior;
//! its first `particles` simulations double as the pilot for feature
//! standardisation. Later stages resample, perturb with a Gaussian kernel
//! and reweight by prior / kernel mixture. Stops when a stage accepts less
//! than `min_acceptance` of its proposals or the budget would be exceeded;
//! the last completed stage is returned. Throws ParticleCollapse when the
//! effective sample size drops below 2.
SmcState smc_abc(const Task& task, const SmcConfig& config, std::uint64_t seed);

// -- MCMC reference -----------------------------------------------------------------------

struct McmcConfig {
  int chains = 4;
  Index burn_in = 3000;
  Index samples = 5000;      // per chain, after burn-in
  Index adapt_window = 100;
  double target_low = 0.2;
  double target_high = 0.4;
  double max_rhat = 1.05;
  int workers = 1;
};

struct McmcChain {
  Mat samples;        // d x samples
  Vec log_posterior;
  double acceptance_rate = 0.0;
  double step_size = 0.0;
};

struct McmcResult {
  std::vector<McmcChain> chains;
  Vec rhat;

  Mat pooled() const;
  Vec mean() const;
  Mat covariance() const;
  //! Standard error of the pooled mean from batch means over each chain.
  Vec mean_standard_error(Index batches = 20) const;
};

//! Split R-hat per coordinate over all chains.
Vec split_rhat(const std::vector<McmcChain>& chains);

//! Random-walk Metropolis with a Gaussian proposal whose covariance adapts
//! during burn-in to the running sample covariance, scaled so that the
//! acceptance rate lands in [target_low, target_high]. Throws
//! NonConvergence when R-hat reaches max_rhat.
McmcResult adaptive_mh(const std::function<double(const Vec&)>& log_target,
                       const std::vector<Vec>& starts, const Mat& initial_cov,
                       const McmcConfig& config, std::uint64_t seed);

//! Exact Bernoulli-GLM posterior under a Gaussian prior. Chains start from
//! overdispersed draws around the Laplace approximation.
McmcResult glm_reference_mcmc(const Gaussian& prior, const GlmSpec& spec, const Vec& spikes,
                              const McmcConfig& config, std::uint64_t seed);

//! Posterior mode and Hessian-based covariance by Newton's method.
Gaussian glm_laplace(const Gaussian& prior, const GlmSpec& spec, const Vec& spikes);

// -- smoothness prior ----------------------------------------------------------------------

enum class Augmentation {
  Dirichlet, // zero values outside the vector: square tridiagonal F
  Ridge,     // interior rows plus 1e-6 I in F^T F
  None,      // interior rows only (rank-deficient)
};

//! Second-difference operator: rows theta_{j-1} - 2 theta_j + theta_{j+1}.
Mat second_difference(Index d, Augmentation aug);

//! N(0, sigma^2 (F^T F)^{-1}). Throws SingularF when F^T F is singular.
Gaussian glm_smoothness_prior(Index d, double sigma, Augmentation aug = Augmentation::Dirichlet);

} // namespace snpe
