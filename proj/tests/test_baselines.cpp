#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "snpe/baselines.hpp"

#include <algorithm>
#include <cmath>

using namespace snpe;

namespace {

// theta ~ N(0, 1), x = theta + N(0, noise^2).
Task linear_gaussian(double x_o, double noise = 0.5) {
  Task t;
  t.name = "linear-gaussian";
  t.theta_names = {"theta"};
  t.feature_names = {"x"};
  t.prior = GaussianMixture(Gaussian{Vec::Zero(1), Mat::Identity(1, 1)});
  t.observed = {Vec::Constant(1, x_o), Vec::Zero(1), Mat()};
  t.simulate = [noise](const Vec& theta, std::uint64_t seed) {
    Rng rng(seed);
    FeatureVector f;
    f.values = Vec::Constant(1, theta[0] + noise * standard_normal(rng));
    f.mask = Vec::Zero(1);
    return Simulation{f, Mat()};
  };
  return t;
}

Task box_gaussian(double x_o) {
  Task t = linear_gaussian(x_o);
  t.prior = BoxUniform(Vec::Constant(1, -3.0), Vec::Constant(1, 3.0));
  return t;
}

// two-sample Kolmogorov-Smirnov statistic
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v)
      ++i;
    while (j < b.size() && b[j] <= v)
      ++j;
    d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
  }
  return d;
}

std::vector<double> row(const Mat& m, Index r) {
  return {m.row(r).begin(), m.row(r).end()};
}

} // namespace

TEST_CASE("abc distance") {
  const Standardizer norm{Vec::Zero(2), Vec::Constant(2, 2.0)};
  const Observation xo{Vec::Zero(2), Vec::Zero(2), Mat()};
  FeatureVector x;
  x.values = Vec(2);
  x.values << 6.0, 8.0;
  x.mask = Vec::Zero(2);
  CHECK(abc_distance(x, xo, norm) == doctest::Approx(5.0));
  x.mask[1] = 1.0;
  CHECK(abc_distance(x, xo, norm) == doctest::Approx(3.0));
  x.bad = true;
  CHECK(std::isinf(abc_distance(x, xo, norm)));
}

TEST_CASE("rejection abc limits") {
  const Task t = linear_gaussian(0.8);
  const Standardizer norm = pilot_standardizer(t, 2000, 1);
  const AbcSamples all = rejection_abc(t, norm, INFINITY, 4000, 2);
  CHECK(all.acceptance_rate == 1.0);
  CHECK(all.theta.cols() == 4000);
  CHECK(std::abs(all.theta.mean()) < 3.0 / std::sqrt(4000.0));
  CHECK_THROWS_AS(rejection_abc(t, norm, 0.0, 1000, 3), NoAcceptances);
}

TEST_CASE("rejection abc matches the conjugate posterior") {
  const Task t = linear_gaussian(0.8);
  const Standardizer norm = pilot_standardizer(t, 2000, 4);
  const AbcSamples s = rejection_abc(t, norm, 0.02, 100000, 5, 4);
  const double post_mean = 0.8 / 1.25, post_sd = std::sqrt(0.25 / 1.25);
  const double n = double(s.theta.cols());
  REQUIRE(n > 300);
  CHECK(std::abs(s.theta.mean() - post_mean) < 3.0 * post_sd / std::sqrt(n));
  CHECK((s.distance.array() <= 0.02).all());
}

TEST_CASE("rejection abc acceptance is monotone in the tolerance") {
  const Task t = linear_gaussian(0.8);
  const Standardizer norm = pilot_standardizer(t, 2000, 6);
  double prev = 2.0;
  for (double eps : {4.0, 1.0, 0.5, 0.2, 0.1, 0.05}) {
    const double rate = rejection_abc(t, norm, eps, 5000, 7).acceptance_rate;
    CHECK(rate <= prev);
    prev = rate;
  }
}

TEST_CASE("smc tolerance schedule") {
  SmcConfig c;
  CHECK(smc_tolerance(c, 0) == 15.0);
  CHECK(smc_tolerance(c, 3) == doctest::Approx(10.935).epsilon(1e-12));
}

TEST_CASE("single-stage smc reduces to rejection abc") {
  const Task t = box_gaussian(0.5);
  SmcConfig c;
  c.particles = 600;
  c.eps0 = 0.15;
  c.max_stages = 1;
  c.budget = 100000;
  const SmcState s = smc_abc(t, c, 8);
  REQUIRE(s.stages.size() == 1);
  CHECK((s.weights.array() == 1.0 / 600).all());
  const AbcSamples r = rejection_abc(t, s.norm, 0.15, 20000, 9);
  const double n = 600, m = double(r.theta.cols());
  // alpha = 0.001 critical value
  CHECK(ks_statistic(row(s.theta, 0), row(r.theta, 0)) < 1.95 * std::sqrt((n + m) / (n * m)));
}

TEST_CASE("smc stages shrink the tolerance and keep a simplex") {
  const Task t = box_gaussian(0.5);
  SmcConfig c;
  c.particles = 300;
  c.eps0 = 2.0;
  c.decay = 0.7;
  c.max_stages = 8;
  c.budget = 20000;
  c.workers = 2;
  const SmcState s = smc_abc(t, c, 10);
  CHECK(s.stages.size() >= 4);
  CHECK(s.simulations <= c.budget);
  CHECK(s.weights.sum() == doctest::Approx(1.0));
  CHECK((s.weights.array() >= 0.0).all());
  for (std::size_t i = 1; i < s.stages.size(); ++i) {
    CHECK(s.stages[i].eps < s.stages[i - 1].eps);
    CHECK(s.stages[i].ess >= 2.0);
  }
  // the eps -> 0 target is N(0.5, 0.25) on the box; the last stage should be close
  const double mean = (s.theta.row(0).transpose().array() * s.weights.array()).sum();
  CHECK(std::abs(mean - 0.5) < 0.12);

  const SmcState again = smc_abc(t, c, 10);
  CHECK(again.theta == s.theta);
}

TEST_CASE("smc stops when the budget runs out") {
  const Task t = box_gaussian(0.5);
  SmcConfig c;
  c.particles = 200;
  c.eps0 = 2.0;
  c.decay = 0.5;
  c.budget = 1500;
  const SmcState s = smc_abc(t, c, 11);
  CHECK(s.simulations <= 1500);
  CHECK(!s.stages.empty());
  c.budget = 100;
  CHECK_THROWS_AS(smc_abc(t, c, 11), ConfigError);
}

TEST_CASE("adaptive mh on a conjugate gaussian target") {
  // y_i ~ N(mu, 1) i = 1..n, mu ~ N(0, I) in 2-D with a correlated likelihood
  Mat A(2, 2);
  A << 4.0, 1.5, 1.5, 2.0;
  Vec b(2);
  b << 1.0, -2.0;
  const Mat post_prec = A + Mat::Identity(2, 2);
  const Vec post_mean = post_prec.llt().solve(b);
  auto target = [&](const Vec& m) { return b.dot(m) - 0.5 * m.dot(post_prec * m); };
  McmcConfig c;
  c.samples = 8000;
  c.workers = 4;
  std::vector<Vec> starts;
  for (int i = 0; i < 4; ++i)
    starts.push_back(Vec::Constant(2, 3.0 * (i - 1.5)));
  const McmcResult r = adaptive_mh(target, starts, Mat::Identity(2, 2), c, 12);
  const Vec se = r.mean_standard_error();
  for (Index k = 0; k < 2; ++k)
    CHECK(std::abs(r.mean()[k] - post_mean[k]) < 3.0 * se[k]);
  const Mat cov = post_prec.inverse();
  CHECK((r.covariance() - cov).norm() < 0.1 * cov.norm());
  CHECK(r.rhat.maxCoeff() < 1.05);
  for (const auto& ch : r.chains) {
    CHECK(ch.acceptance_rate > 0.15);
    CHECK(ch.acceptance_rate < 0.45);
    CHECK(ch.samples.cols() == 8000);
  }
}

TEST_CASE("adaptive mh reports non-convergence") {
  // two far-apart modes, one chain pair started in each
  auto target = [](const Vec& m) {
    const double a = -0.5 * (m[0] - 20) * (m[0] - 20), b = -0.5 * (m[0] + 20) * (m[0] + 20);
    return std::max(a, b) + std::log1p(std::exp(std::min(a, b) - std::max(a, b)));
  };
  McmcConfig c;
  c.burn_in = 500;
  c.samples = 1000;
  std::vector<Vec> starts{Vec::Constant(1, 20), Vec::Constant(1, 20), Vec::Constant(1, -20),
                          Vec::Constant(1, -20)};
  CHECK_THROWS_AS(adaptive_mh(target, starts, Mat::Identity(1, 1), c, 13), NonConvergence);
}

TEST_CASE("glm reference on silent data") {
  const GlmSpec spec = GlmSpec::make(100, 14);
  const Gaussian prior = glm_smoothness_prior(10, 0.5);
  const Vec y = Vec::Zero(100);
  McmcConfig c;
  c.burn_in = 2000;
  c.samples = 3000;
  c.workers = 4;
  const McmcResult r = glm_reference_mcmc(prior, spec, y, c, 15);
  CHECK(r.mean().allFinite());
  CHECK(r.rhat.maxCoeff() < 1.05);
  // silence pushes the bias down
  CHECK(r.mean()[0] < prior.mean[0]);
  const Gaussian lap = glm_laplace(prior, spec, y);
  CHECK((r.mean() - lap.mean).norm() < 0.5 * std::sqrt(lap.covariance().trace()));
}

TEST_CASE("glm reference is reproducible across seeds") {
  const GlmSpec spec = GlmSpec::make(100, 16);
  const Gaussian prior = glm_smoothness_prior(10, 0.5);
  Vec beta = Vec::Zero(10);
  beta[0] = -1.0;
  beta[2] = 0.8;
  Rng rng(17);
  const Vec y = simulate_glm(spec, beta, rng);
  McmcConfig c;
  c.workers = 4;
  const McmcResult a = glm_reference_mcmc(prior, spec, y, c, 18);
  const McmcResult b = glm_reference_mcmc(prior, spec, y, c, 19);
  const Vec tol = 3.0 * (a.mean_standard_error().array().square() + b.mean_standard_error().array().square()).sqrt();
  CHECK(((a.mean() - b.mean()).array().abs() < tol.array()).all());
  const McmcResult a2 = glm_reference_mcmc(prior, spec, y, c, 18);
  CHECK(a2.chains[2].samples == a.chains[2].samples);
}

TEST_CASE("laplace mode is stationary") {
  const GlmSpec spec = GlmSpec::make(200, 20);
  const Gaussian prior = glm_smoothness_prior(10, 1.0);
  Vec beta = Vec::Zero(10);
  beta[1] = 1.0;
  Rng rng(21);
  const Vec y = simulate_glm(spec, beta, rng);
  const Gaussian lap = glm_laplace(prior, spec, y);
  auto f = [&](const Vec& b) { return glm_log_likelihood(spec, y, b) + log_pdf(prior, b); };
  for (Index k = 0; k < 10; ++k) {
    Vec e = Vec::Zero(10);
    e[k] = 1e-5;
    CHECK(std::abs(f(lap.mean + e) - f(lap.mean - e)) / 2e-5 < 1e-5);
  }
}

TEST_CASE("smoothness prior") {
  const Gaussian g = glm_smoothness_prior(10, 1.0);
  const Mat cov = g.covariance();
  CHECK((cov - cov.transpose()).norm() < 1e-12);
  CHECK(Eigen::LLT<Mat>(cov).info() == Eigen::Success);

  // mean |second difference| against white noise with the same marginal sds
  Rng rng(22);
  const Mat F = second_difference(10, Augmentation::None);
  const Vec sd = cov.diagonal().cwiseSqrt();
  double smooth = 0.0, white = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vec s = g.mean + g.chol * standard_normal_vec(rng, 10);
    const Vec w = sd.cwiseProduct(standard_normal_vec(rng, 10));
    smooth += (F * s).cwiseAbs().mean();
    white += (F * w).cwiseAbs().mean();
  }
  CHECK(smooth / white < 0.5);

  CHECK(glm_smoothness_prior(10, 2.0).covariance().isApprox(4.0 * cov));
  CHECK_THROWS_AS(glm_smoothness_prior(10, 1.0, Augmentation::None), SingularF);
  CHECK_THROWS_AS(glm_smoothness_prior(2, 1.0), ConfigError);
  const Mat ridge = glm_smoothness_prior(10, 1.0, Augmentation::Ridge).covariance();
  CHECK(Eigen::LLT<Mat>(ridge).info() == Eigen::Success);
  CHECK(ridge.diagonal().maxCoeff() > 1e3); // the null space is barely constrained
}

TEST_CASE("smoothness prior for d = 3 by hand") {
  Mat F(3, 3);
  F << -2, 1, 0, 1, -2, 1, 0, 1, -2;
  CHECK(second_difference(3, Augmentation::Dirichlet) == F);
  Mat interior(1, 3);
  interior << 1, -2, 1;
  CHECK(second_difference(3, Augmentation::None) == interior);
  // F^-1 = -(1/4) [[3,2,1],[2,4,2],[1,2,3]], so (F^T F)^-1 = F^-2
  Mat expect(3, 3);
  expect << 14, 16, 10, 16, 24, 16, 10, 16, 14;
  expect /= 16.0;
  CHECK(glm_smoothness_prior(3, 1.0).covariance().isApprox(expect, 1e-12));
  CHECK(glm_smoothness_prior(3, 0.5).covariance().isApprox(0.25 * expect, 1e-12));
}
