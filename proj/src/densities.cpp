#include "snpe/densities.hpp"
#include "snpe/simulators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace snpe {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m))
    return m;
  return m + std::log((v.array() - m).exp().sum());
}

double log_normal_chol(const Vec& mean, const Mat& chol, const Vec& x) {
  const Vec z = chol.triangularView<Eigen::Lower>().solve(x - mean);
  const double log_det = chol.diagonal().array().log().sum();
  return -0.5 * static_cast<double>(mean.size()) * kLog2Pi - log_det -
         0.5 * z.squaredNorm();
}

Mat cholesky_or_throw(const Mat& sym, const char* what) {
  Eigen::LLT<Mat> llt(0.5 * (sym + sym.transpose()));
  if (llt.info() != Eigen::Success)
    throw NonPositivePrecision(std::string(what) + ": matrix is not positive definite");
  Mat l = llt.matrixL();
  if ((l.diagonal().array() <= 0.0).any() || !l.allFinite())
    throw NonPositivePrecision(std::string(what) + ": matrix is not positive definite");
  return l;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

} // namespace

Mat Gaussian::precision() const {
  const Mat inv_l = chol.triangularView<Eigen::Lower>().solve(Mat::Identity(dim(), dim()));
  return inv_l.transpose() * inv_l;
}

GaussianMixture::GaussianMixture(Vec w, std::vector<Vec> mu, std::vector<Mat> l,
                                 std::vector<std::string> dim_names)
    : weights(std::move(w)), means(std::move(mu)), chols(std::move(l)),
      names(std::move(dim_names)) {
  validate();
}

GaussianMixture::GaussianMixture(const Gaussian& g)
    : weights(Vec::Ones(1)), means{g.mean}, chols{g.chol} {
  validate();
}

void GaussianMixture::validate() const {
  const Index k = weights.size();
  if (k < 1)
    throw FormatError("mixture needs at least one component");
  if (static_cast<Index>(means.size()) != k || static_cast<Index>(chols.size()) != k)
    throw FormatError("mixture component arrays disagree in length");
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12)
    throw FormatError("mixture weights are not on the simplex");
  const Index d = means.front().size();
  for (Index i = 0; i < k; ++i) {
    if (means[i].size() != d || chols[i].rows() != d || chols[i].cols() != d)
      throw FormatError("mixture component dimensions disagree");
    if ((chols[i].diagonal().array() <= 0.0).any())
      throw FormatError("Cholesky factor has a non-positive diagonal");
    if (!means[i].allFinite() || !chols[i].allFinite())
      throw FormatError("mixture contains non-finite values");
  }
  if (!names.empty() && static_cast<Index>(names.size()) != d)
    throw FormatError("mixture has the wrong number of dimension names");
}

BoxUniform::BoxUniform(Vec lo, Vec hi) : lower(std::move(lo)), upper(std::move(hi)) {
  require_dim(upper.size(), lower.size(), "BoxUniform");
  if ((lower.array() >= upper.array()).any())
    throw FormatError("BoxUniform requires lower < upper componentwise");
}

bool BoxUniform::contains(const Vec& x) const {
  return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
}

double log_pdf(const Gaussian& g, const Vec& x) {
  require_dim(x.size(), g.dim(), "log_pdf");
  return log_normal_chol(g.mean, g.chol, x);
}

double log_pdf(const GaussianMixture& m, const Vec& x) {
  require_dim(x.size(), m.dim(), "log_pdf");
  Vec terms(m.components());
  for (Index k = 0; k < m.components(); ++k)
    terms[k] = (m.weights[k] > 0.0 ? std::log(m.weights[k]) : kNegInf) +
               log_normal_chol(m.means[k], m.chols[k], x);
  return log_sum_exp(terms);
}

double log_pdf(const BoxUniform& b, const Vec& x) {
  require_dim(x.size(), b.dim(), "log_pdf");
  if (!b.contains(x))
    return kNegInf;
  return -(b.upper - b.lower).array().log().sum();
}

double log_pdf(const Distribution& d, const Vec& x) {
  return std::visit([&](const auto& dist) { return log_pdf(dist, x); }, d);
}

Mat sample(const Gaussian& g, Index n, Rng& rng) {
  Mat out(g.dim(), n);
  for (Index j = 0; j < n; ++j)
    out.col(j) = g.mean + g.chol * standard_normal_vec(rng, g.dim());
  return out;
}

Mat sample(const GaussianMixture& m, Index n, Rng& rng) {
  Mat out(m.dim(), n);
  for (Index j = 0; j < n; ++j) {
    const Index k = categorical(rng, m.weights);
    out.col(j) = m.means[k] + m.chols[k] * standard_normal_vec(rng, m.dim());
  }
  return out;
}

Mat sample(const BoxUniform& b, Index n, Rng& rng) {
  Mat out(b.dim(), n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < b.dim(); ++i)
      out(i, j) = b.lower[i] + (b.upper[i] - b.lower[i]) * uniform01(rng);
  return out;
}

Mat sample(const Distribution& d, Index n, Rng& rng) {
  return std::visit([&](const auto& dist) { return sample(dist, n, rng); }, d);
}

Index dim(const Distribution& d) {
  return std::visit([](const auto& dist) { return dist.dim(); }, d);
}

Vec mean(const GaussianMixture& m) {
  Vec mu = Vec::Zero(m.dim());
  for (Index k = 0; k < m.components(); ++k)
    mu += m.weights[k] * m.means[k];
  return mu;
}

Mat covariance(const GaussianMixture& m) {
  const Vec mu = mean(m);
  Mat c = Mat::Zero(m.dim(), m.dim());
  for (Index k = 0; k < m.components(); ++k) {
    const Vec dm = m.means[k] - mu;
    c += m.weights[k] * (m.chols[k] * m.chols[k].transpose() + dm * dm.transpose());
  }
  return c;
}

Vec mean(const Distribution& d) {
  if (const auto* b = std::get_if<BoxUniform>(&d))
    return 0.5 * (b->lower + b->upper);
  return mean(std::get<GaussianMixture>(d));
}

Mat covariance(const Distribution& d) {
  if (const auto* b = std::get_if<BoxUniform>(&d)) {
    const Vec w = b->upper - b->lower;
    return (w.array().square() / 12.0).matrix().asDiagonal();
  }
  return covariance(std::get<GaussianMixture>(d));
}

bool in_support(const Distribution& d, const Vec& x) {
  if (const auto* b = std::get_if<BoxUniform>(&d))
    return b->contains(x);
  return x.allFinite();
}

GaussianMixture marginal(const GaussianMixture& m, const std::vector<Index>& dims) {
  const Index q = static_cast<Index>(dims.size());
  std::vector<Vec> means;
  std::vector<Mat> chols;
  for (Index k = 0; k < m.components(); ++k) {
    const Mat cov = m.chols[k] * m.chols[k].transpose();
    Vec mu(q);
    Mat sub(q, q);
    for (Index i = 0; i < q; ++i) {
      mu[i] = m.means[k][dims[i]];
      for (Index j = 0; j < q; ++j)
        sub(i, j) = cov(dims[i], dims[j]);
    }
    means.push_back(mu);
    chols.push_back(cholesky_or_throw(sub, "marginal"));
  }
  std::vector<std::string> names;
  if (!m.names.empty())
    for (Index i : dims)
      names.push_back(m.names[i]);
  return {m.weights, std::move(means), std::move(chols), std::move(names)};
}

GaussianMixture affine(const GaussianMixture& m, const Vec& shift, const Vec& scale) {
  require_dim(shift.size(), m.dim(), "affine");
  require_dim(scale.size(), m.dim(), "affine");
  std::vector<Vec> means;
  std::vector<Mat> chols;
  for (Index k = 0; k < m.components(); ++k) {
    means.push_back(shift + scale.cwiseProduct(m.means[k]));
    Mat l = scale.asDiagonal() * m.chols[k];
    // keep the diagonal positive when a scale is negative
    for (Index j = 0; j < l.cols(); ++j)
      if (l(j, j) < 0)
        l.col(j) = -l.col(j);
    chols.push_back(l);
  }
  return {m.weights, std::move(means), std::move(chols), m.names};
}

Vec mixture_mode(const GaussianMixture& m) {
  const Index d = m.dim();
  std::vector<Mat> prec(m.components());
  for (Index k = 0; k < m.components(); ++k)
    prec[k] = m.component(k).precision();

  Vec best = m.means[0];
  double best_lp = log_pdf(m, best);
  for (Index start = 0; start < m.components(); ++start) {
    Vec x = m.means[start];
    for (int it = 0; it < 500; ++it) {
      Vec logr(m.components());
      for (Index k = 0; k < m.components(); ++k)
        logr[k] = std::log(std::max(m.weights[k], 1e-300)) +
                  log_normal_chol(m.means[k], m.chols[k], x);
      const Vec r = (logr.array() - log_sum_exp(logr)).exp();
      Mat a = Mat::Zero(d, d);
      Vec b = Vec::Zero(d);
      for (Index k = 0; k < m.components(); ++k) {
        a += r[k] * prec[k];
        b += r[k] * prec[k] * m.means[k];
      }
      const Vec next = a.ldlt().solve(b);
      const double step = (next - x).norm();
      x = next;
      if (step < 1e-12 * (1.0 + x.norm()))
        break;
    }
    const double lp = log_pdf(m, x);
    if (lp > best_lp) {
      best_lp = lp;
      best = x;
    }
  }
  return best;
}

double marginal_quantile(const GaussianMixture& m, Index dim_index, double p) {
  if (!(p > 0.0 && p < 1.0))
    throw Error("marginal_quantile: p must lie in (0, 1)");
  Vec mu(m.components()), sd(m.components());
  for (Index k = 0; k < m.components(); ++k) {
    mu[k] = m.means[k][dim_index];
    sd[k] = m.chols[k].row(dim_index).norm();
  }
  auto cdf = [&](double x) {
    double c = 0.0;
    for (Index k = 0; k < m.components(); ++k)
      c += m.weights[k] * normal_cdf((x - mu[k]) / sd[k]);
    return c;
  };
  double lo = (mu.array() - 40.0 * sd.array()).minCoeff();
  double hi = (mu.array() + 40.0 * sd.array()).maxCoeff();
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double kl_diag_gaussians(const DiagGaussian& q_new, const DiagGaussian& q_old) {
  require_dim(q_old.dim(), q_new.dim(), "kl_diag_gaussians");
  const auto var_new = q_new.std.array().square();
  const auto var_old = q_old.std.array().square();
  const auto diff = (q_new.mean - q_old.mean).array();
  return 0.5 * ((var_old / var_new).log() + var_new / var_old - 1.0 +
                diff.square() / var_old)
                   .sum();
}

NaturalGaussian to_natural(const Gaussian& g) {
  NaturalGaussian n;
  n.precision = g.precision();
  n.shift = n.precision * g.mean;
  return n;
}

Gaussian from_natural(const NaturalGaussian& n) {
  const Mat lp = cholesky_or_throw(n.precision, "from_natural");
  const Index d = n.shift.size();
  const Vec mean = Eigen::LLT<Mat>(0.5 * (n.precision + n.precision.transpose())).solve(n.shift);
  // covariance = lp^-T lp^-1
  const Mat inv_lp = lp.triangularView<Eigen::Lower>().solve(Mat::Identity(d, d));
  const Mat cov = inv_lp.transpose() * inv_lp;
  return {mean, cholesky_or_throw(cov, "from_natural")};
}

Gaussian divide_gaussian(const Gaussian& numerator,
                         const std::optional<Gaussian>& denominator,
                         const Distribution& prior) {
  NaturalGaussian n = to_natural(numerator);
  if (denominator) {
    require_dim(denominator->dim(), numerator.dim(), "divide_gaussian");
    const NaturalGaussian den = to_natural(*denominator);
    n.precision -= den.precision;
    n.shift -= den.shift;
  }
  if (const auto* g = std::get_if<GaussianMixture>(&prior)) {
    if (g->components() != 1)
      throw Error("divide_gaussian: a Gaussian prior must have one component");
    const NaturalGaussian pr = to_natural(g->component(0));
    n.precision += pr.precision;
    n.shift += pr.shift;
  }
  return from_natural(n);
}

Gaussian multiply_gaussian(const Gaussian& a, const Gaussian& b) {
  NaturalGaussian na = to_natural(a);
  const NaturalGaussian nb = to_natural(b);
  na.precision += nb.precision;
  na.shift += nb.shift;
  return from_natural(na);
}

Vec linspace(double lo, double hi, Index n) {
  if (n < 2)
    throw Error("linspace needs at least two points");
  return Vec::LinSpaced(n, lo, hi);
}

double trapezoid(const Vec& grid, const Vec& values) {
  require_dim(values.size(), grid.size(), "trapezoid");
  double s = 0.0;
  for (Index i = 1; i < grid.size(); ++i)
    s += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
  return s;
}

Vec analytic_gm_posterior(const GmSpec& model, const Vec& x_obs,
                          const BoxUniform& prior, const Vec& grid) {
  require_dim(prior.dim(), 1, "analytic_gm_posterior");
  Vec logp(grid.size());
  for (Index i = 0; i < grid.size(); ++i) {
    const double th = grid[i];
    if (th < prior.lower[0] || th > prior.upper[0]) {
      logp[i] = kNegInf;
      continue;
    }
    double s = 0.0;
    for (Index j = 0; j < x_obs.size(); ++j)
      s += gm_log_likelihood(model, x_obs[j], th);
    logp[i] = s;
  }
  const double m = logp.maxCoeff();
  Vec p = (logp.array() - m).exp();
  p /= trapezoid(grid, p);
  return p;
}

double grid_kl(const Vec& grid, const Vec& p, const Vec& q) {
  Vec integrand(grid.size());
  for (Index i = 0; i < grid.size(); ++i) {
    if (p[i] <= 0.0) {
      integrand[i] = 0.0;
      continue;
    }
    integrand[i] = q[i] > 0.0 ? p[i] * std::log(p[i] / q[i])
                              : std::numeric_limits<double>::infinity();
  }
  return trapezoid(grid, integrand);
}

// -- serialisation -----------------------------------------------------------

nlohmann::json to_json(const GaussianMixture& m) {
  nlohmann::json j;
  j["format"] = "snpekit.gaussian_mixture";
  j["version"] = 1;
  j["dim"] = m.dim();
  j["names"] = m.names;
  j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size());
  auto& means = j["means"] = nlohmann::json::array();
  auto& chols = j["chol"] = nlohmann::json::array();
  for (Index k = 0; k < m.components(); ++k) {
    means.push_back(std::vector<double>(m.means[k].data(), m.means[k].data() + m.dim()));
    nlohmann::json rows = nlohmann::json::array();
    for (Index r = 0; r < m.dim(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(r + 1));
      for (Index c = 0; c <= r; ++c)
        row[static_cast<std::size_t>(c)] = m.chols[k](r, c);
      rows.push_back(row);
    }
    chols.push_back(rows);
  }
  return j;
}

GaussianMixture mixture_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "snpekit.gaussian_mixture")
      throw FormatError("not a snpekit.gaussian_mixture document");
    const Index d = j.at("dim").get<Index>();
    const auto w = j.at("weights").get<std::vector<double>>();
    Vec weights = Eigen::Map<const Vec>(w.data(), static_cast<Index>(w.size()));
    std::vector<Vec> means;
    std::vector<Mat> chols;
    for (const auto& mj : j.at("means")) {
      const auto v = mj.get<std::vector<double>>();
      if (static_cast<Index>(v.size()) != d)
        throw FormatError("mean has the wrong length");
      means.emplace_back(Eigen::Map<const Vec>(v.data(), d));
    }
    for (const auto& cj : j.at("chol")) {
      Mat l = Mat::Zero(d, d);
      if (static_cast<Index>(cj.size()) != d)
        throw FormatError("Cholesky factor has the wrong number of rows");
      for (Index r = 0; r < d; ++r) {
        const auto row = cj.at(static_cast<std::size_t>(r)).get<std::vector<double>>();
        if (static_cast<Index>(row.size()) != r + 1)
          throw FormatError("Cholesky row has the wrong length");
        for (Index c = 0; c <= r; ++c)
          l(r, c) = row[static_cast<std::size_t>(c)];
      }
      chols.push_back(l);
    }
    std::vector<std::string> names;
    if (j.contains("names"))
      names = j.at("names").get<std::vector<std::string>>();
    return {weights, std::move(means), std::move(chols), std::move(names)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed mixture JSON: ") + e.what());
  }
}

nlohmann::json to_json(const BoxUniform& b) {
  return {{"format", "snpekit.box_uniform"},
          {"version", 1},
          {"lower", std::vector<double>(b.lower.data(), b.lower.data() + b.dim())},
          {"upper", std::vector<double>(b.upper.data(), b.upper.data() + b.dim())}};
}

nlohmann::json to_json(const Distribution& d) {
  return std::visit([](const auto& dist) { return to_json(dist); }, d);
}

Distribution distribution_from_json(const nlohmann::json& j) {
  if (j.value("format", "") == "snpekit.box_uniform") {
    const auto lo = j.at("lower").get<std::vector<double>>();
    const auto hi = j.at("upper").get<std::vector<double>>();
    return BoxUniform(Eigen::Map<const Vec>(lo.data(), static_cast<Index>(lo.size())),
                      Eigen::Map<const Vec>(hi.data(), static_cast<Index>(hi.size())));
  }
  return mixture_from_json(j);
}

void save_mixture(const GaussianMixture& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out)
    throw FormatError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

GaussianMixture load_mixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw FormatError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return mixture_from_json(j);
}

} // namespace snpe
