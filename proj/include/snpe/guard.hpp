#pragma once

#include "snpe/common.hpp"
#include "snpe/densities.hpp"
#include "snpe/grad.hpp"
#include "snpe/mdn.hpp"
#include "snpe/rng.hpp"

#include <filesystem>
#include <functional>

namespace snpe {

struct GuardConfig {
  Index hidden = 20;
  int epochs = 200;
  Index batch = 100;
  AdamConfig adam;
  //! Accept everything until both classes have this many labels.
  Index min_per_class = 50;
  long max_consecutive_rejections = 100000;
};

//! theta -> sigmoid(w2 . tanh(W1 theta_std + b1) + b2), the probability
//! that a simulation at theta breaks. Only (theta, b) pairs are ever seen.
struct GuardNet {
  GuardConfig config;
  Standardizer theta_norm;
  ParamStore params; // W1 (h x d), b1, w2 (1 x h), b2
  Mat buffer_theta;  // d x n, all rounds
  Vec buffer_label;
  long updates = 0;

  Index dim() const { return theta_norm.size(); }
  Index labels(bool bad) const;
  //! Enough labels of both classes to trust the classifier.
  bool active() const;
  double predict(const Vec& theta) const;
  Vec predict(const Mat& thetas) const;
};

//! Output layer starts at zero, so a fresh guard predicts 0.5 everywhere.
GuardNet make_guard(const GuardConfig& config, Standardizer theta_norm, std::uint64_t seed);

//! Appends the pairs to the buffer and, once active, runs `epochs` passes
//! of Adam on the log-loss over the whole buffer. Returns the final
//! mean log-loss over the buffer (NaN when the guard is still bypassed).
double guard_update(GuardNet& guard, const Mat& theta, const Vec& bad, std::uint64_t seed);

//! Mean log-loss of the current guard on the buffer.
double guard_log_loss(const GuardNet& guard);

//! Mean log-loss at parameters `p` on raw thetas with 0/1 labels; fills
//! `grad` when given.
double guard_loss(const GuardNet& guard, const Vec& p, const Mat& theta, const Vec& labels,
                  Vec* grad = nullptr);

struct GuardedDraw {
  Vec theta;
  long rejections = 0;
};

using ThetaSampler = std::function<Vec(Rng&)>;
using BreakProbability = std::function<double(const Vec&)>;

//! Draw from `propose` and accept with probability 1 - g(theta).
//! Throws ProposalStarvation after `max_rejections` consecutive rejections.
GuardedDraw guarded_propose(const ThetaSampler& propose, const BreakProbability& g, Rng& rng,
                            long max_rejections = 100000);
//! Uses the guard, or accepts the first draw while it is bypassed.
GuardedDraw guarded_propose(const ThetaSampler& propose, const GuardNet& guard, Rng& rng);

//! prior(theta) * (1 - g(theta)) at each column of `grid` (unnormalised).
Vec effective_prior_report(const Distribution& prior, const GuardNet& guard, const Mat& grid);
//! Same on a regular 2-D grid over two coordinates (others at the prior
//! mean), written as CSV `<name_i>,<name_j>,prior,guard,effective`.
void write_effective_prior_grid(const Distribution& prior, const GuardNet& guard, Index i,
                                Index j, const Vec& axis_i, const Vec& axis_j,
                                const std::vector<std::string>& names,
                                const std::filesystem::path& path);

void save_guard(const GuardNet& guard, const std::filesystem::path& path);
GuardNet load_guard(const std::filesystem::path& path);

} // namespace snpe
