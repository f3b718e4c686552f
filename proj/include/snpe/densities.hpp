#pragma once

#include "snpe/common.hpp"
#include "snpe/rng.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace snpe {

struct GmSpec;

//! Multivariate normal with a lower-triangular Cholesky factor of the
//! covariance.
struct Gaussian {
  Vec mean;
  Mat chol;

  Index dim() const { return mean.size(); }
  Mat covariance() const { return chol * chol.transpose(); }
  Mat precision() const;
};

//! sum_k weights[k] N(means[k], chols[k] chols[k]^T).
struct GaussianMixture {
  Vec weights;
  std::vector<Vec> means;
  std::vector<Mat> chols;
  std::vector<std::string> names;

  GaussianMixture() = default;
  GaussianMixture(Vec w, std::vector<Vec> mu, std::vector<Mat> l,
                  std::vector<std::string> dim_names = {});
  explicit GaussianMixture(const Gaussian& g);

  Index dim() const { return means.empty() ? 0 : means.front().size(); }
  Index components() const { return weights.size(); }
  Gaussian component(Index k) const { return {means[k], chols[k]}; }

  //! Throws FormatError if weights are off the simplex or a Cholesky
  //! diagonal is not strictly positive.
  void validate() const;
};

//! Product of independent uniforms on [lower_i, upper_i].
struct BoxUniform {
  Vec lower;
  Vec upper;

  BoxUniform() = default;
  BoxUniform(Vec lo, Vec hi);
  Index dim() const { return lower.size(); }
  bool contains(const Vec& x) const;
};

//! Independent Gaussians N(mean_i, std_i^2), used for network weights.
struct DiagGaussian {
  Vec mean;
  Vec std;
  Index dim() const { return mean.size(); }
};

//! Anything usable as a prior or proposal over parameters.
using Distribution = std::variant<BoxUniform, GaussianMixture>;

double log_pdf(const Gaussian& g, const Vec& x);
double log_pdf(const GaussianMixture& m, const Vec& x);
double log_pdf(const BoxUniform& b, const Vec& x);
double log_pdf(const Distribution& d, const Vec& x);

//! n draws, one per column.
Mat sample(const Gaussian& g, Index n, Rng& rng);
Mat sample(const GaussianMixture& m, Index n, Rng& rng);
Mat sample(const BoxUniform& b, Index n, Rng& rng);
Mat sample(const Distribution& d, Index n, Rng& rng);

Index dim(const Distribution& d);
Vec mean(const GaussianMixture& m);
Mat covariance(const GaussianMixture& m);
Vec mean(const Distribution& d);
Mat covariance(const Distribution& d);
bool in_support(const Distribution& d, const Vec& x);

//! Mixture over a subset of coordinates (exact for Gaussian mixtures).
GaussianMixture marginal(const GaussianMixture& m, const std::vector<Index>& dims);

//! Push the mixture through x -> shift + scale .* x.
GaussianMixture affine(const GaussianMixture& m, const Vec& shift, const Vec& scale);

//! Highest local mode found by mean-shift iteration from each component mean.
Vec mixture_mode(const GaussianMixture& m);

//! Quantile of the 1-D marginal of coordinate `dim_index`.
double marginal_quantile(const GaussianMixture& m, Index dim_index, double p);

//! KL(q_new || q_old) between diagonal Gaussians.
double kl_diag_gaussians(const DiagGaussian& q_new, const DiagGaussian& q_old);

//! Natural parameterisation: precision matrix and precision-weighted mean.
struct NaturalGaussian {
  Mat precision;
  Vec shift;
};

NaturalGaussian to_natural(const Gaussian& g);
//! Throws NonPositivePrecision when the precision is not positive definite.
Gaussian from_natural(const NaturalGaussian& n);

//! numerator / denominator * prior in natural parameters. A missing
//! denominator means an improper flat density; a BoxUniform prior is flat
//! within its bounds. Throws NonPositivePrecision on an invalid result.
Gaussian divide_gaussian(const Gaussian& numerator,
                         const std::optional<Gaussian>& denominator,
                         const Distribution& prior);

Gaussian multiply_gaussian(const Gaussian& a, const Gaussian& b);

//! Evenly spaced grid including both end points.
Vec linspace(double lo, double hi, Index n);
//! Trapezoid-rule integral of values over a (possibly uneven) 1-D grid.
double trapezoid(const Vec& grid, const Vec& values);

//! Exact posterior over the scalar mean parameter of the mixture model given
//! observations `x_obs`, evaluated on `grid` and normalised by the trapezoid
//! rule. Grid points outside `prior` get density zero.
Vec analytic_gm_posterior(const GmSpec& model, const Vec& x_obs,
                          const BoxUniform& prior, const Vec& grid);

//! Grid KL(p || q) for densities tabulated on the same grid.
double grid_kl(const Vec& grid, const Vec& p, const Vec& q);

// -- serialisation ---------------------------------------------------------

nlohmann::json to_json(const GaussianMixture& m);
GaussianMixture mixture_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BoxUniform& b);
nlohmann::json to_json(const Distribution& d);
Distribution distribution_from_json(const nlohmann::json& j);

void save_mixture(const GaussianMixture& m, const std::filesystem::path& path);
GaussianMixture load_mixture(const std::filesystem::path& path);

} // namespace snpe
