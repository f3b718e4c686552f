#include "snpe/guard.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <locale>
#include <numeric>

namespace snpe {

namespace {

constexpr const char* kGuardFormat = "snpekit.guard";

struct GuardView {
  Eigen::Map<const Mat> w1;
  Eigen::Map<const Vec> b1;
  Eigen::Map<const Mat> w2;
  double b2;
};

GuardView view(const GuardNet& g, const Vec& p) {
  const Index h = g.config.hidden, d = g.dim();
  const double* q = p.data();
  return {Eigen::Map<const Mat>(q, h, d), Eigen::Map<const Vec>(q + h * d, h),
          Eigen::Map<const Mat>(q + h * d + h, 1, h), q[h * d + 2 * h]};
}

// Logits for a batch of standardised thetas; optionally keeps the hidden layer.
Vec logits(const GuardNet& g, const Vec& p, const Mat& ts, Mat* hidden = nullptr) {
  const auto v = view(g, p);
  Mat a = ((v.w1 * ts).colwise() + v.b1).array().tanh().matrix();
  Vec out = (v.w2 * a).transpose().array() + v.b2;
  if (hidden)
    *hidden = std::move(a);
  return out;
}

double softplus(double u) { return u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }
double sigmoid(double u) { return logistic(u); }

// Mean log-loss and its gradient on the selected buffer columns.
double loss_and_grad(const GuardNet& g, const Vec& p, const Mat& ts, const Vec& y, Vec* grad) {
  Mat a;
  const Vec f = logits(g, p, ts, grad ? &a : nullptr);
  const double n = static_cast<double>(y.size());
  double loss = 0.0;
  for (Index i = 0; i < f.size(); ++i)
    loss += softplus(f[i]) - y[i] * f[i];
  loss /= n;
  if (!grad)
    return loss;
  const auto v = view(g, p);
  const Index h = g.config.hidden, d = g.dim();
  Vec df(f.size());
  for (Index i = 0; i < f.size(); ++i)
    df[i] = (sigmoid(f[i]) - y[i]) / n;
  grad->setZero(p.size());
  const Mat da = (v.w2.transpose() * df.transpose()).array() * (1.0 - a.array().square());
  Eigen::Map<Mat>(grad->data(), h, d) = da * ts.transpose();
  grad->segment(h * d, h) = da.rowwise().sum();
  grad->segment(h * d + h, h) = a * df;
  (*grad)[h * d + 2 * h] = df.sum();
  return loss;
}

nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from(const nlohmann::json& j) {
  const auto s = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(s.data(), static_cast<Index>(s.size()));
}

} // namespace

double guard_loss(const GuardNet& guard, const Vec& p, const Mat& theta, const Vec& labels,
                  Vec* grad) {
  require_dim(p.size(), guard.params.size(), "guard params");
  require_dim(labels.size(), theta.cols(), "guard labels");
  return loss_and_grad(guard, p, guard.theta_norm.apply(theta), labels, grad);
}

Index GuardNet::labels(bool bad) const {
  const double target = bad ? 1.0 : 0.0;
  return (buffer_label.array() == target).count();
}

bool GuardNet::active() const {
  return labels(true) >= config.min_per_class && labels(false) >= config.min_per_class;
}

double GuardNet::predict(const Vec& theta) const {
  require_dim(theta.size(), dim(), "guard input");
  return sigmoid(logits(*this, params.values(), theta_norm.apply(theta))[0]);
}

Vec GuardNet::predict(const Mat& thetas) const {
  require_dim(thetas.rows(), dim(), "guard input");
  return logits(*this, params.values(), theta_norm.apply(thetas)).unaryExpr(&sigmoid);
}

GuardNet make_guard(const GuardConfig& config, Standardizer theta_norm, std::uint64_t seed) {
  if (config.hidden < 1 || config.epochs < 0 || config.batch < 1)
    throw ConfigError("guard: hidden, epochs and batch must be positive");
  GuardNet g;
  g.config = config;
  g.theta_norm = std::move(theta_norm);
  const Index d = g.dim(), h = config.hidden;
  g.params.add("W1", h, d);
  g.params.add("b1", h);
  g.params.add("w2", 1, h);
  g.params.add("b2", 1);
  Rng rng(seed);
  const double bound = std::sqrt(3.0 / static_cast<double>(d));
  auto w1 = g.params.block("W1");
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < h; ++i)
      w1(i, j) = bound * (2.0 * uniform01(rng) - 1.0);
  g.buffer_theta.resize(d, 0);
  return g;
}

double guard_log_loss(const GuardNet& guard) {
  if (guard.buffer_label.size() == 0)
    return std::nan("");
  return loss_and_grad(guard, guard.params.values(), guard.theta_norm.apply(guard.buffer_theta),
                       guard.buffer_label, nullptr);
}

double guard_update(GuardNet& guard, const Mat& theta, const Vec& bad, std::uint64_t seed) {
  require_dim(theta.rows(), guard.dim(), "guard labels");
  require_dim(bad.size(), theta.cols(), "guard labels");
  for (Index i = 0; i < bad.size(); ++i)
    if (bad[i] != 0.0 && bad[i] != 1.0)
      throw Error("guard labels must be 0 or 1");
  const Index n0 = guard.buffer_theta.cols(), n = n0 + theta.cols();
  guard.buffer_theta.conservativeResize(Eigen::NoChange, n);
  guard.buffer_theta.rightCols(theta.cols()) = theta;
  guard.buffer_label.conservativeResize(n);
  guard.buffer_label.tail(bad.size()) = bad;
  if (!guard.active())
    return std::nan("");

  const Mat ts = guard.theta_norm.apply(guard.buffer_theta);
  Vec& p = guard.params.values();
  AdamState adam(p.size(), guard.config.adam);
  Rng rng(seed);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Vec grad;
  const Index bs = std::min(guard.config.batch, n);
  for (int epoch = 0; epoch < guard.config.epochs; ++epoch) {
    for (Index i = n - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(i + 1))]);
    for (Index start = 0; start + bs <= n; start += bs) {
      Mat tb(guard.dim(), bs);
      Vec yb(bs);
      for (Index k = 0; k < bs; ++k) {
        tb.col(k) = ts.col(order[start + k]);
        yb[k] = guard.buffer_label[order[start + k]];
      }
      const double l = loss_and_grad(guard, p, tb, yb, &grad);
      if (!std::isfinite(l) || !grad.allFinite())
        throw NonFiniteLoss("guard log-loss is not finite");
      adam_step(adam, p, grad);
    }
  }
  ++guard.updates;
  return guard_log_loss(guard);
}

GuardedDraw guarded_propose(const ThetaSampler& propose, const BreakProbability& g, Rng& rng,
                            long max_rejections) {
  GuardedDraw out;
  for (;;) {
    Vec theta = propose(rng);
    if (uniform01(rng) >= g(theta)) {
      out.theta = std::move(theta);
      return out;
    }
    if (++out.rejections > max_rejections)
      throw ProposalStarvation("guard rejected " + std::to_string(out.rejections) +
                               " consecutive proposals");
  }
}

GuardedDraw guarded_propose(const ThetaSampler& propose, const GuardNet& guard, Rng& rng) {
  if (!guard.active())
    return {propose(rng), 0};
  return guarded_propose(
      propose, [&](const Vec& t) { return guard.predict(t); }, rng,
      guard.config.max_consecutive_rejections);
}

Vec effective_prior_report(const Distribution& prior, const GuardNet& guard, const Mat& grid) {
  const Vec g = guard.predict(grid);
  Vec out(grid.cols());
  for (Index i = 0; i < grid.cols(); ++i)
    out[i] = std::exp(log_pdf(prior, grid.col(i))) * (1.0 - g[i]);
  return out;
}

void write_effective_prior_grid(const Distribution& prior, const GuardNet& guard, Index i,
                                Index j, const Vec& axis_i, const Vec& axis_j,
                                const std::vector<std::string>& names,
                                const std::filesystem::path& path) {
  const Vec centre = mean(prior);
  Mat grid(guard.dim(), axis_i.size() * axis_j.size());
  Index col = 0;
  for (Index a = 0; a < axis_i.size(); ++a)
    for (Index b = 0; b < axis_j.size(); ++b, ++col) {
      grid.col(col) = centre;
      grid(i, col) = axis_i[a];
      grid(j, col) = axis_j[b];
    }
  const Vec g = guard.predict(grid);
  const Vec eff = effective_prior_report(prior, guard, grid);
  std::ofstream out(path);
  if (!out)
    throw Error("cannot write " + path.string());
  out.imbue(std::locale::classic());
  out.precision(17);
  out << names.at(static_cast<std::size_t>(i)) << ',' << names.at(static_cast<std::size_t>(j))
      << ",prior,guard,effective\n";
  for (Index c = 0; c < grid.cols(); ++c)
    out << grid(i, c) << ',' << grid(j, c) << ',' << std::exp(log_pdf(prior, grid.col(c))) << ','
        << g[c] << ',' << eff[c] << '\n';
}

void save_guard(const GuardNet& guard, const std::filesystem::path& path) {
  const auto& c = guard.config;
  nlohmann::json h{{"format", kGuardFormat},
                   {"version", 1},
                   {"hidden", c.hidden},
                   {"epochs", c.epochs},
                   {"batch", c.batch},
                   {"min_per_class", c.min_per_class},
                   {"max_consecutive_rejections", c.max_consecutive_rejections},
                   {"adam", {{"learning_rate", c.adam.learning_rate}, {"beta1", c.adam.beta1},
                             {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
                   {"updates", guard.updates},
                   {"theta_norm", {{"shift", vec_json(guard.theta_norm.shift)},
                                   {"scale", vec_json(guard.theta_norm.scale)}}}};
  const Vec buffer = guard.buffer_theta.reshaped();
  write_checkpoint(path, h,
                   {{"params", &guard.params.values()}, {"buffer_theta", &buffer},
                    {"buffer_label", &guard.buffer_label}});
}

GuardNet load_guard(const std::filesystem::path& path) {
  auto [h, arrays] = read_checkpoint(path);
  if (h.value("format", "") != kGuardFormat || h.value("version", 0) != 1)
    throw FormatError(path.string() + ": not a guard checkpoint");
  if (arrays.size() != 3)
    throw FormatError(path.string() + ": expected 3 arrays");
  GuardConfig c;
  c.hidden = h.at("hidden").get<Index>();
  c.epochs = h.at("epochs").get<int>();
  c.batch = h.at("batch").get<Index>();
  c.min_per_class = h.at("min_per_class").get<Index>();
  c.max_consecutive_rejections = h.at("max_consecutive_rejections").get<long>();
  const auto& a = h.at("adam");
  c.adam = {a.at("learning_rate"), a.at("beta1"), a.at("beta2"), a.at("epsilon")};
  GuardNet g = make_guard(c, {vec_from(h.at("theta_norm").at("shift")),
                              vec_from(h.at("theta_norm").at("scale"))}, 0);
  require_dim(arrays[0].size(), g.params.size(), "guard params");
  g.params.values() = arrays[0];
  const Index n = arrays[2].size();
  require_dim(arrays[1].size(), n * g.dim(), "guard buffer");
  g.buffer_theta = arrays[1].reshaped(g.dim(), n);
  g.buffer_label = arrays[2];
  g.updates = h.at("updates").get<long>();
  g.params.validate();
  return g;
}

} // namespace snpe
