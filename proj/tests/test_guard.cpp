#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "snpe/guard.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace snpe;

namespace {

Standardizer unit(Index d) { return Standardizer::identity(d); }

// (J, tau) uniform on the autapse box, labelled by the analytic stability
// boundary J > 1.
std::pair<Mat, Vec> autapse_labels(Index n, Rng& rng) {
  Vec lo(2), hi(2);
  lo << 0.0, -1.0;
  hi << 2.0, 2.5;
  const Mat t = sample(BoxUniform(lo, hi), n, rng);
  Vec b(n);
  for (Index i = 0; i < n; ++i)
    b[i] = t(0, i) > 1.0 ? 1.0 : 0.0;
  return {t, b};
}

Standardizer autapse_norm() {
  Vec shift(2), scale(2);
  shift << 1.0, 0.75;
  scale << 2.0 / std::sqrt(12.0), 3.5 / std::sqrt(12.0);
  return {shift, scale};
}

struct GuardLoss {
  const GuardNet* g;
  Mat theta;
  Vec y;
  double loss(const Vec& p, const int&, std::uint64_t) const { return guard_loss(*g, p, theta, y); }
  GradReport evaluate(const Vec& p, const int&, std::uint64_t) const {
    Vec grad;
    const double l = guard_loss(*g, p, theta, y, &grad);
    return {l, grad};
  }
};

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

} // namespace

TEST_CASE("fresh guard predicts one half and is bypassed") {
  const GuardNet g = make_guard({}, unit(3), 1);
  Rng rng(2);
  const Mat t = standard_normal_mat(rng, 3, 20);
  CHECK((g.predict(t).array() == 0.5).all());
  CHECK_FALSE(g.active());
  // while bypassed every first draw is accepted
  const auto d = guarded_propose([](Rng& r) { return standard_normal_vec(r, 3); }, g, rng);
  CHECK(d.rejections == 0);
}

TEST_CASE("guard stays bypassed until both classes have enough labels") {
  GuardNet g = make_guard({}, unit(1), 1);
  const Vec before = g.params.values();
  Mat t = Mat::Zero(1, 120);
  Vec b = Vec::Zero(120);
  b.head(49).setOnes();
  CHECK(std::isnan(guard_update(g, t, b, 3)));
  CHECK(g.params.values() == before);
  CHECK(g.buffer_label.size() == 120);
  CHECK(std::isfinite(guard_update(g, Mat::Zero(1, 1), Vec::Ones(1), 3)));
  CHECK(g.active());
  CHECK(g.buffer_label.size() == 121);
}

TEST_CASE("guard log-loss gradient matches central differences") {
  GuardConfig cfg;
  cfg.hidden = 7;
  GuardNet g = make_guard(cfg, autapse_norm(), 4);
  Rng rng(5);
  g.params.values() = 0.7 * standard_normal_vec(rng, g.params.size());
  auto [t, y] = autapse_labels(40, rng);
  GuardLoss model{&g, t, y};
  const auto r = value_and_grad(model, g.params, 0, 0);
  const Vec fd = finite_difference_grad(model, g.params.values(), 0, 0);
  CHECK(max_relative_error(r.grad, fd) < 1e-4);
}

TEST_CASE("one-class labels collapse the predictions toward zero") {
  GuardConfig cfg;
  cfg.min_per_class = 0;
  GuardNet g = make_guard(cfg, autapse_norm(), 1);
  Rng rng(6);
  auto [t, y] = autapse_labels(1000, rng);
  const double before = guard_log_loss(g);
  CHECK(std::isnan(before));
  guard_update(g, t, Vec::Zero(1000), 7);
  CHECK(g.predict(t).mean() < 0.1);
}

TEST_CASE("guard recovers the analytic autapse boundary") {
  GuardNet g = make_guard({}, autapse_norm(), 1);
  Rng rng(8);
  for (int round = 0; round < 5; ++round) {
    auto [t, y] = autapse_labels(1000, rng);
    guard_update(g, t, y, 100 + round);
  }
  CHECK(g.buffer_label.size() == 5000);
  for (double tau : {-0.8, 0.2, 1.0, 2.5}) {
    INFO("tau = " << tau);
    Vec lo(2), hi(2);
    lo << 0.9, tau;
    hi << 1.1, tau;
    CHECK(g.predict(lo) < 0.5);
    CHECK(g.predict(hi) > 0.5);
  }
  Vec far(2);
  far << 1.3, 1.0;
  CHECK(g.predict(far) > 0.9);
}

TEST_CASE("relabelling b -> 1-b mirrors the predictions") {
  GuardConfig cfg;
  cfg.epochs = 50;
  Rng rng(9);
  auto [t, y] = autapse_labels(800, rng);
  GuardNet a = make_guard(cfg, autapse_norm(), 11);
  GuardNet b = make_guard(cfg, autapse_norm(), 11);
  guard_update(a, t, y, 12);
  guard_update(b, t, (1.0 - y.array()).matrix(), 12);
  const Vec pa = a.predict(t), pb = b.predict(t);
  CHECK(((pa.array() + pb.array()) - 1.0).abs().maxCoeff() < 0.05);
}

TEST_CASE("guarded proposals") {
  Rng rng(13);
  const ThetaSampler normal = [](Rng& r) { return standard_normal_vec(r, 1); };

  SUBCASE("g = 0 accepts the first draw") {
    for (int i = 0; i < 100; ++i)
      CHECK(guarded_propose(normal, [](const Vec&) { return 0.0; }, rng).rejections == 0);
  }
  SUBCASE("indicator guard restricts the proposal to the other half") {
    const int n = 10000;
    std::vector<double> xs;
    for (int i = 0; i < n; ++i)
      xs.push_back(guarded_propose(normal, [](const Vec& t) { return t[0] < 0 ? 1.0 : 0.0; }, rng)
                       .theta[0]);
    std::sort(xs.begin(), xs.end());
    CHECK(xs.front() >= 0.0);
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
      const double f = 2.0 * normal_cdf(xs[i]) - 1.0;
      d = std::max({d, std::abs(f - i / double(n)), std::abs(f - (i + 1) / double(n))});
    }
    CHECK(d < 1.63 / std::sqrt(n));
  }
  SUBCASE("g = 1/2 thins at rate one half") {
    const int n = 20000;
    long rejected = 0;
    for (int i = 0; i < n; ++i)
      rejected += guarded_propose(normal, [](const Vec&) { return 0.5; }, rng).rejections;
    // acceptances out of n + rejected trials
    const double trials = n + rejected;
    const double rate = n / trials;
    CHECK(std::abs(rate - 0.5) < 4.0 * std::sqrt(0.25 / trials));
  }
  SUBCASE("a guard that rejects everything starves") {
    CHECK_THROWS_AS(guarded_propose(normal, [](const Vec&) { return 1.0; }, rng, 1000),
                    ProposalStarvation);
  }
}

TEST_CASE("effective prior report") {
  Vec lo(2), hi(2);
  lo << 0.0, -1.0;
  hi << 2.0, 2.5;
  const Distribution box = BoxUniform(lo, hi);
  const GuardNet fresh = make_guard({}, autapse_norm(), 1);
  Rng rng(14);
  const Mat grid = sample(std::get<BoxUniform>(box), 50, rng);
  const Vec r = effective_prior_report(box, fresh, grid);
  CHECK((r.array() - 0.5 / 7.0).abs().maxCoeff() < 1e-15);

  const Distribution gauss = GaussianMixture(Gaussian{Vec::Zero(2), Mat::Identity(2, 2)});
  const Vec rg = effective_prior_report(gauss, fresh, grid);
  for (Index i = 0; i < grid.cols(); ++i)
    CHECK(rg[i] == doctest::Approx(0.5 * std::exp(log_pdf(gauss, grid.col(i)))));

  GuardNet g = make_guard({}, autapse_norm(), 1);
  for (int round = 0; round < 5; ++round) {
    auto [t, y] = autapse_labels(1000, rng);
    guard_update(g, t, y, 200 + round);
  }
  Mat probe(2, 2);
  probe << 0.5, 1.15, 1.0, 1.0;
  const Vec e = effective_prior_report(box, g, probe);
  CHECK(e[1] < 0.05 * e[0]);

  const auto path = std::filesystem::temp_directory_path() / "snpe_effective_prior.csv";
  write_effective_prior_grid(box, g, 0, 1, linspace(0, 2, 5), linspace(-1, 2.5, 4), {"J", "tau"},
                             path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "J,tau,prior,guard,effective");
  int lines = 0;
  for (std::string l; std::getline(in, l);)
    ++lines;
  CHECK(lines == 20);
  std::filesystem::remove(path);
}

TEST_CASE("guard checkpoint round trip") {
  GuardNet g = make_guard({}, autapse_norm(), 1);
  Rng rng(15);
  auto [t, y] = autapse_labels(300, rng);
  guard_update(g, t, y, 16);
  const auto path = std::filesystem::temp_directory_path() / "snpe_guard.bin";
  save_guard(g, path);
  const GuardNet h = load_guard(path);
  CHECK(h.params.values() == g.params.values());
  CHECK(h.buffer_theta == g.buffer_theta);
  CHECK(h.buffer_label == g.buffer_label);
  CHECK(h.predict(t) == g.predict(t));
  CHECK(h.updates == 1);
  std::filesystem::remove(path);
}
