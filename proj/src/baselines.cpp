#include "snpe/baselines.hpp"

#include "snpe/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace snpe {

namespace {

std::vector<FeatureVector> simulate_all(const Task& task, const Mat& theta, std::uint64_t seed,
                                        std::uint64_t tag, int workers) {
  std::vector<FeatureVector> out(static_cast<std::size_t>(theta.cols()));
  parallel_for(out.size(), workers, [&](std::size_t i) {
    out[i] = task.simulate(theta.col(static_cast<Index>(i)), derive_seed(seed, {tag, i})).features;
  });
  return out;
}

Standardizer fit_good(const std::vector<FeatureVector>& xs) {
  std::vector<Index> good;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!xs[i].bad)
      good.push_back(static_cast<Index>(i));
  if (good.empty())
    throw NoAcceptances("every pilot simulation was bad");
  const Index F = xs[static_cast<std::size_t>(good.front())].size();
  Mat x(F, static_cast<Index>(good.size())), m(F, static_cast<Index>(good.size()));
  for (std::size_t k = 0; k < good.size(); ++k) {
    x.col(static_cast<Index>(k)) = xs[static_cast<std::size_t>(good[k])].values;
    m.col(static_cast<Index>(k)) = xs[static_cast<std::size_t>(good[k])].mask;
  }
  return Standardizer::fit(x, m);
}

Mat weighted_covariance(const Mat& theta, const Vec& w) {
  const Vec mu = theta * w;
  const Mat c = theta.colwise() - mu;
  return c * w.asDiagonal() * c.transpose();
}

Mat checked_chol(const Mat& cov, const char* what) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw NonPositivePrecision(std::string(what) + " is not positive definite");
  return llt.matrixL();
}

double log_normal_kernel(const Vec& x, const Vec& mu, const Eigen::LLT<Mat>& llt, double log_norm) {
  const Vec z = llt.matrixL().solve(x - mu);
  return log_norm - 0.5 * z.squaredNorm();
}

} // namespace

// -- rejection ABC ---------------------------------------------------------------------

double abc_distance(const FeatureVector& x, const Observation& xo, const Standardizer& norm) {
  if (x.bad)
    return INFINITY;
  require_dim(x.size(), xo.x.size(), "abc features");
  const Vec a = norm.apply(x.values), b = norm.apply(xo.x);
  double sq = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool missing = x.mask[i] != 0.0 || (xo.mask.size() != 0 && xo.mask[i] != 0.0);
    if (!missing)
      sq += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return std::sqrt(sq);
}

Standardizer pilot_standardizer(const Task& task, Index n, std::uint64_t seed, int workers) {
  Rng rng(derive_seed(seed, {1}));
  const Mat theta = sample(task.prior, n, rng);
  return fit_good(simulate_all(task, theta, seed, 2, workers));
}

AbcSamples rejection_abc(const Task& task, const Standardizer& norm, double eps, Index n,
                         std::uint64_t seed, int workers) {
  if (!(eps >= 0.0))
    throw ConfigError("abc tolerance must be non-negative");
  Rng rng(derive_seed(seed, {1}));
  const Mat theta = sample(task.prior, n, rng);
  const auto xs = simulate_all(task, theta, seed, 2, workers);
  std::vector<Index> keep;
  std::vector<double> dist;
  for (Index i = 0; i < n; ++i) {
    const double d = abc_distance(xs[static_cast<std::size_t>(i)], task.observed, norm);
    if (d <= eps) {
      keep.push_back(i);
      dist.push_back(d);
    }
  }
  if (keep.empty())
    throw NoAcceptances("no simulation within tolerance " + std::to_string(eps));
  AbcSamples out;
  out.theta = theta(Eigen::all, keep);
  out.distance = Eigen::Map<const Vec>(dist.data(), static_cast<Index>(dist.size()));
  out.simulations = n;
  out.acceptance_rate = static_cast<double>(keep.size()) / static_cast<double>(n);
  return out;
}

// -- SMC ABC -------------------------------------------------------------------------------

SmcState smc_abc(const Task& task, const SmcConfig& cfg, std::uint64_t seed) {
  if (cfg.particles < 2)
    throw ConfigError("smc needs at least 2 particles");
  if (!(cfg.decay > 0.0 && cfg.decay < 1.0) || !(cfg.eps0 > 0.0))
    throw ConfigError("smc tolerance schedule must be strictly decreasing");
  if (cfg.budget < cfg.particles)
    throw ConfigError("smc budget is smaller than one population");
  const Index P = cfg.particles, d = task.theta_dim();
  Rng rng(derive_seed(seed, {0}));
  std::uint64_t batch_tag = 1;

  // Stage 0: rejection from the prior; the first batch is also the pilot.
  SmcState state;
  Mat theta = sample(task.prior, P, rng);
  auto xs = simulate_all(task, theta, seed, batch_tag++, cfg.workers);
  state.norm = fit_good(xs);
  state.simulations = P;
  std::vector<Vec> accepted;
  Index stage_sims = P, hits = 0;
  const double eps0 = smc_tolerance(cfg, 0);
  auto take = [&](const Mat& th, const std::vector<FeatureVector>& f, double eps) {
    for (Index i = 0; i < th.cols(); ++i)
      if (abc_distance(f[static_cast<std::size_t>(i)], task.observed, state.norm) <= eps) {
        ++hits;
        if (static_cast<Index>(accepted.size()) < P)
          accepted.push_back(th.col(i));
      }
  };
  // batch size from the running acceptance rate, so little is simulated
  // past the last needed particle
  auto batch_size = [&](double rate, Index sims) {
    const double need = double(P - static_cast<Index>(accepted.size()));
    const double r = std::max(rate, cfg.min_acceptance);
    const Index n = static_cast<Index>(std::ceil(1.2 * need / r)) + 10;
    return std::min({n, P, cfg.budget - sims});
  };
  take(theta, xs, eps0);
  while (static_cast<Index>(accepted.size()) < P) {
    const Index n = batch_size(double(hits) / double(stage_sims), state.simulations);
    if (n <= 0)
      throw NoAcceptances("smc budget exhausted before the first population was complete");
    theta = sample(task.prior, n, rng);
    xs = simulate_all(task, theta, seed, batch_tag++, cfg.workers);
    state.simulations += n;
    stage_sims += n;
    take(theta, xs, eps0);
  }
  state.theta.resize(d, P);
  for (Index i = 0; i < P; ++i)
    state.theta.col(i) = accepted[static_cast<std::size_t>(i)];
  state.weights = Vec::Constant(P, 1.0 / static_cast<double>(P));
  state.stages.push_back({eps0, stage_sims, double(hits) / double(stage_sims), double(P)});
  double rate = double(hits) / double(stage_sims);

  for (int stage = 1; stage < cfg.max_stages; ++stage) {
    const double eps = smc_tolerance(cfg, stage);
    const Mat cov = cfg.kernel_scale * weighted_covariance(state.theta, state.weights) +
                    1e-12 * Mat::Identity(d, d);
    const Mat L = checked_chol(cov, "smc perturbation covariance");
    const Eigen::LLT<Mat> llt(cov);
    const double log_norm = -0.5 * d * std::log(2 * M_PI) - L.diagonal().array().log().sum();

    accepted.clear();
    stage_sims = 0;
    hits = 0;
    bool failed = false;
    Index sims = state.simulations;
    while (static_cast<Index>(accepted.size()) < P) {
      const Index n = batch_size(stage_sims > 0 ? double(hits) / double(stage_sims) : rate, sims);
      if (n <= 0) {
        failed = true;
        break;
      }
      Mat cand(d, n);
      for (Index i = 0; i < n; ++i) {
        for (;;) {
          const Index j = categorical(rng, state.weights);
          const Vec t = state.theta.col(j) + L * standard_normal_vec(rng, d);
          if (in_support(task.prior, t)) {
            cand.col(i) = t;
            break;
          }
        }
      }
      xs = simulate_all(task, cand, seed, batch_tag++, cfg.workers);
      sims += n;
      stage_sims += n;
      take(cand, xs, eps);
      if (double(hits) < cfg.min_acceptance * double(stage_sims) && stage_sims >= P) {
        failed = true;
        break;
      }
    }
    if (failed) {
      // the stage's simulations were spent even though it is discarded
      state.simulations = sims;
      break;
    }

    Mat next(d, P);
    Vec w(P);
    for (Index i = 0; i < P; ++i) {
      next.col(i) = accepted[static_cast<std::size_t>(i)];
      double mix = 0.0;
      for (Index j = 0; j < P; ++j)
        mix += state.weights[j] * std::exp(log_normal_kernel(next.col(i), state.theta.col(j), llt, log_norm));
      w[i] = std::exp(log_pdf(task.prior, next.col(i))) / mix;
    }
    if (!(w.sum() > 0.0) || !w.allFinite())
      throw ParticleCollapse("smc weights degenerate at stage " + std::to_string(stage));
    w /= w.sum();
    const double ess = 1.0 / w.squaredNorm();
    if (ess < 2.0)
      throw ParticleCollapse("effective sample size " + std::to_string(ess) + " at stage " +
                             std::to_string(stage));
    state.theta = std::move(next);
    state.weights = std::move(w);
    state.simulations = sims;
    rate = double(hits) / double(stage_sims);
    state.stages.push_back({eps, stage_sims, rate, ess});
  }
  return state;
}

// -- MCMC ---------------------------------------------------------------------------------------

Mat McmcResult::pooled() const {
  Index n = 0;
  for (const auto& c : chains)
    n += c.samples.cols();
  Mat out(chains.front().samples.rows(), n);
  Index at = 0;
  for (const auto& c : chains) {
    out.middleCols(at, c.samples.cols()) = c.samples;
    at += c.samples.cols();
  }
  return out;
}

Vec McmcResult::mean() const { return pooled().rowwise().mean(); }

Mat McmcResult::covariance() const {
  const Mat s = pooled();
  const Mat c = s.colwise() - s.rowwise().mean();
  return c * c.transpose() / static_cast<double>(s.cols() - 1);
}

Vec McmcResult::mean_standard_error(Index batches) const {
  std::vector<Vec> means;
  for (const auto& c : chains) {
    const Index len = c.samples.cols() / batches;
    for (Index b = 0; b < batches; ++b)
      means.push_back(c.samples.middleCols(b * len, len).rowwise().mean());
  }
  const Index m = static_cast<Index>(means.size());
  Mat bm(means.front().size(), m);
  for (Index i = 0; i < m; ++i)
    bm.col(i) = means[static_cast<std::size_t>(i)];
  const Mat c = bm.colwise() - bm.rowwise().mean();
  return (c.array().square().rowwise().sum() / double(m - 1) / double(m)).sqrt();
}

Vec split_rhat(const std::vector<McmcChain>& chains) {
  std::vector<Mat> halves;
  for (const auto& c : chains) {
    const Index h = c.samples.cols() / 2;
    halves.push_back(c.samples.leftCols(h));
    halves.push_back(c.samples.middleCols(h, h));
  }
  const Index d = halves.front().rows(), n = halves.front().cols(), m = static_cast<Index>(halves.size());
  Vec out(d);
  for (Index k = 0; k < d; ++k) {
    Vec means(m), vars(m);
    for (Index j = 0; j < m; ++j) {
      const auto row = halves[static_cast<std::size_t>(j)].row(k);
      means[j] = row.mean();
      vars[j] = (row.array() - means[j]).square().sum() / double(n - 1);
    }
    const double W = vars.mean();
    const double B = double(n) * (means.array() - means.mean()).square().sum() / double(m - 1);
    const double v = (double(n - 1) / n) * W + B / n;
    out[k] = W > 0.0 ? std::sqrt(v / W) : 1.0;
  }
  return out;
}

McmcResult adaptive_mh(const std::function<double(const Vec&)>& log_target,
                       const std::vector<Vec>& starts, const Mat& initial_cov,
                       const McmcConfig& cfg, std::uint64_t seed) {
  if (cfg.chains < 2 || static_cast<int>(starts.size()) != cfg.chains)
    throw ConfigError("mcmc needs at least 2 chains and one start per chain");
  if (cfg.samples < 4 || cfg.burn_in < 0 || cfg.adapt_window < 1)
    throw ConfigError("mcmc chain lengths are invalid");
  const Index d = initial_cov.rows();
  const Mat L0 = checked_chol(initial_cov, "initial proposal covariance");

  McmcResult result;
  result.chains.resize(static_cast<std::size_t>(cfg.chains));
  parallel_for(result.chains.size(), cfg.workers, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    Vec x = starts[c];
    require_dim(x.size(), d, "mcmc start");
    double lp = log_target(x);
    if (!std::isfinite(lp))
      throw NonConvergence("mcmc start has zero target density");
    Mat L = L0;
    double scale = 1.0;
    Mat history(d, cfg.burn_in);
    long accepted = 0;
    auto step = [&] {
      const Vec y = x + scale * (L * standard_normal_vec(rng, d));
      const double ly = log_target(y);
      if (std::isfinite(ly) && std::log(uniform_open01(rng)) < ly - lp) {
        x = y;
        lp = ly;
        return true;
      }
      return false;
    };
    long window = 0;
    for (Index t = 0; t < cfg.burn_in; ++t) {
      window += step();
      history.col(t) = x;
      if ((t + 1) % cfg.adapt_window == 0) {
        const double rate = double(window) / double(cfg.adapt_window);
        if (rate < cfg.target_low)
          scale *= 0.75;
        else if (rate > cfg.target_high)
          scale *= 1.3;
        window = 0;
        // after enough history, switch to the empirical covariance
        if (t + 1 >= std::max<Index>(20 * d, 5 * cfg.adapt_window) && (t + 1) % (5 * cfg.adapt_window) == 0) {
          const Mat h = history.leftCols(t + 1).rightCols((t + 1) / 2);
          const Mat cen = h.colwise() - h.rowwise().mean();
          Mat emp = cen * cen.transpose() / double(h.cols() - 1);
          emp *= 2.38 * 2.38 / double(d);
          emp += 1e-10 * Mat::Identity(d, d);
          Eigen::LLT<Mat> llt(emp);
          if (llt.info() == Eigen::Success) {
            L = llt.matrixL();
            scale = 1.0;
          }
        }
      }
    }
    McmcChain& chain = result.chains[c];
    chain.samples.resize(d, cfg.samples);
    chain.log_posterior.resize(cfg.samples);
    for (Index t = 0; t < cfg.samples; ++t) {
      accepted += step();
      chain.samples.col(t) = x;
      chain.log_posterior[t] = lp;
    }
    chain.acceptance_rate = double(accepted) / double(cfg.samples);
    chain.step_size = scale;
  });
  result.rhat = split_rhat(result.chains);
  if (result.rhat.maxCoeff() >= cfg.max_rhat)
    throw NonConvergence("split R-hat " + std::to_string(result.rhat.maxCoeff()) + " >= " +
                         std::to_string(cfg.max_rhat));
  return result;
}

Gaussian glm_laplace(const Gaussian& prior, const GlmSpec& spec, const Vec& spikes) {
  const Mat& V = spec.design;
  require_dim(spikes.size(), V.rows(), "spike train");
  require_dim(prior.dim(), V.cols(), "glm prior");
  const Mat P = prior.precision();
  Vec beta = prior.mean;
  Mat H;
  for (int it = 0; it < 100; ++it) {
    const Vec p = (V * beta).unaryExpr([](double u) { return logistic(u); });
    const Vec g = V.transpose() * (spikes - p) - P * (beta - prior.mean);
    const Vec w = p.array() * (1.0 - p.array());
    H = V.transpose() * w.asDiagonal() * V + P;
    const Vec stepv = H.llt().solve(g);
    beta += stepv;
    if (stepv.norm() < 1e-12)
      break;
  }
  const Mat cov = H.inverse();
  return {beta, checked_chol(0.5 * (cov + cov.transpose()), "laplace covariance")};
}

McmcResult glm_reference_mcmc(const Gaussian& prior, const GlmSpec& spec, const Vec& spikes,
                              const McmcConfig& cfg, std::uint64_t seed) {
  const Gaussian lap = glm_laplace(prior, spec, spikes);
  const Index d = prior.dim();
  Rng rng(derive_seed(seed, {1000}));
  std::vector<Vec> starts;
  for (int c = 0; c < cfg.chains; ++c)
    starts.push_back(lap.mean + 2.0 * lap.chol * standard_normal_vec(rng, d));
  auto target = [&](const Vec& beta) {
    return glm_log_likelihood(spec, spikes, beta) + log_pdf(prior, beta);
  };
  return adaptive_mh(target, starts, lap.covariance() * (2.38 * 2.38 / double(d)), cfg,
                     derive_seed(seed, {2000}));
}

// -- smoothness prior ---------------------------------------------------------------------

Mat second_difference(Index d, Augmentation aug) {
  if (d < 3)
    throw ConfigError("smoothness prior needs at least 3 coefficients");
  if (aug == Augmentation::Dirichlet) {
    Mat F = Mat::Zero(d, d);
    for (Index j = 0; j < d; ++j) {
      F(j, j) = -2.0;
      if (j > 0)
        F(j, j - 1) = 1.0;
      if (j + 1 < d)
        F(j, j + 1) = 1.0;
    }
    return F;
  }
  Mat F = Mat::Zero(d - 2, d);
  for (Index j = 0; j + 2 < d; ++j) {
    F(j, j) = 1.0;
    F(j, j + 1) = -2.0;
    F(j, j + 2) = 1.0;
  }
  return F;
}

Gaussian glm_smoothness_prior(Index d, double sigma, Augmentation aug) {
  if (!(sigma > 0.0))
    throw ConfigError("smoothness prior scale must be positive");
  const Mat F = second_difference(d, aug);
  Mat FtF = F.transpose() * F;
  if (aug == Augmentation::Ridge)
    FtF += 1e-6 * Mat::Identity(d, d);
  Eigen::FullPivLU<Mat> lu(FtF);
  lu.setThreshold(1e-12);
  if (lu.rank() < d)
    throw SingularF("F^T F has rank " + std::to_string(lu.rank()) + " < " + std::to_string(d));
  Mat cov = sigma * sigma * FtF.inverse();
  cov = 0.5 * (cov + cov.transpose());
  return {Vec::Zero(d), checked_chol(cov, "smoothness prior covariance")};
}

} // namespace snpe
