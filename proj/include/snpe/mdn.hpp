#pragma once

#include "snpe/common.hpp"
#include "snpe/densities.hpp"
#include "snpe/features.hpp"
#include "snpe/grad.hpp"
#include "snpe/rng.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace snpe {

enum class Activation { Tanh, Relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct MdnArchitecture {
  Index n_features = 1;
  std::vector<Index> hidden{50, 50};
  Activation activation = Activation::Tanh;
  Index components = 1;
  Index theta_dim = 1;
  bool bayesian = true;
  bool impute = false;           // learnable c for masked features
  std::optional<GruShape> gru;   // recurrent front end instead of x

  Index input_size() const { return gru ? gru->units : n_features; }
  //! K logits, K*d means, K*d(d+1)/2 precision-factor entries.
  Index head_size() const;
  void validate() const;
};

//! x -> (x - shift) ./ scale
struct Standardizer {
  Vec shift;
  Vec scale;

  static Standardizer identity(Index n);
  //! Column statistics over entries whose mask is 0. Degenerate scales
  //! fall back to 1.
  static Standardizer fit(const Mat& data, const Mat& mask);
  Index size() const { return shift.size(); }
  Mat apply(const Mat& x) const;
};

//! One network input: features with their mask, or a sequence (inputs x T)
//! when the architecture has a GRU front end.
struct Observation {
  Vec x;
  Vec mask;
  Mat sequence;
};

//! Mixture-density network over theta given features. Dense weights are
//! either point values or independent Gaussians with means and log-stds;
//! imputation values and GRU weights are always point parameters.
//!
//! Parameter layout: [c | gru | dense means | dense log-stds]. Each output
//! head component k owns precision factor U_k (upper triangular, log
//! diagonal listed first, then the strict upper triangle row by row) so
//! that theta_std ~ N(mu_k, (U_k^T U_k)^{-1}).
struct Mdn {
  MdnArchitecture arch;
  Standardizer x_norm;
  Standardizer theta_norm;
  ParamStore params;

  Index c_offset = 0, c_size = 0;
  Index gru_offset = 0, gru_size = 0;
  Index mean_offset = 0, dense_size = 0;
  Index logstd_offset = 0; // == mean_offset + dense_size when bayesian

  struct Layer {
    Index in, out;
    Index w, b; // offsets inside the dense region
  };
  std::vector<Layer> layers;

  Index size() const { return params.size(); }
  Eigen::Map<const Vec> dense_means(const Vec& p) const;
  Eigen::Map<const Vec> dense_logstds(const Vec& p) const;
  //! Mean-field distribution over dense weights held in `p`.
  DiagGaussian weight_posterior(const Vec& p) const;
  DiagGaussian weight_posterior() const { return weight_posterior(params.values()); }
};

inline constexpr double kInitLogStd = -4.605170185988091; // log(1e-2)

//! Builds the layout and initialises: dense means scaled-uniform in
//! +-sqrt(3 / fan_in), biases 0, log-stds log(1e-2), c = 0, GRU weights
//! uniform in +-1/sqrt(units).
Mdn make_mdn(const MdnArchitecture& arch, Standardizer x_norm, Standardizer theta_norm,
             std::uint64_t seed);

//! Mixture over raw theta from the dense means in `p`.
GaussianMixture forward(const Mdn& net, const Vec& p, const Observation& obs);
//! Posterior at the observation using the mean weights.
GaussianMixture extract_posterior(const Mdn& net, const Observation& obs);

//! Draw dense weights from the mean-field distribution; the returned vector
//! has the layout of `net.params` with the sample in the mean slots.
Vec sample_network(const Mdn& net, Rng& rng);

// -- training objective ---------------------------------------------------------

//! Columns are samples. `weight` carries importance weight times kernel value.
struct MdnBatch {
  Mat theta;
  Mat x;
  Mat mask;
  std::vector<Mat> steps; // GRU inputs per time step, inputs x batch
  Vec weight;
  Index size() const { return theta.cols(); }
};

struct ObjectiveOptions {
  //! Multiplies -(1/|B|) sum_n weight_n log q(theta_n | x_n).
  double data_scale = 1.0;
  //! Sample pre-activations from the weight posterior (local
  //! reparameterisation); otherwise the mean weights are used.
  bool reparameterise = true;
  //! KL(pi || weight_prior) * prior_scale is added when set.
  std::optional<DiagGaussian> weight_prior;
  double prior_scale = 0.0;
  //! Gaussian penalty precision on point parameters (c, GRU), also
  //! multiplied by prior_scale.
  double point_precision = 0.0;
};

//! Loss and gradient of the objective above over the full parameter vector.
GradReport mdn_objective(const Mdn& net, const Vec& p, const MdnBatch& batch,
                         const ObjectiveOptions& opt, std::uint64_t seed, bool want_grad = true);

//! -(1/N) sum_n weight_n log q(theta_n | x_n) with mean weights.
double mdn_log_loss(const Mdn& net, const Vec& p, const MdnBatch& batch);

//! Adapter satisfying DifferentiableModel.
struct MdnModel {
  const Mdn* net;
  ObjectiveOptions options;

  GradReport evaluate(const Vec& p, const MdnBatch& b, std::uint64_t seed) const {
    return mdn_objective(*net, p, b, options, seed, true);
  }
  double loss(const Vec& p, const MdnBatch& b, std::uint64_t seed) const {
    return mdn_objective(*net, p, b, options, seed, false).loss;
  }
};

//! log q(theta_n | x_n) for every column, mean weights.
Vec mdn_log_density(const Mdn& net, const Vec& p, const MdnBatch& batch);

// -- growing the mixture ------------------------------------------------------------

struct ComponentAddition {
  Mdn net;
  //! For each dense parameter of the new network, its index in the old
  //! dense region, or -1 for newly created entries.
  std::vector<Index> source;
};

//! Adds a component copied from the one with the largest weight at `obs`,
//! with N(0, noise^2) offsets on its mean biases and a logit bias chosen so
//! that its weight at `obs` is 1/(K+1). Existing heads are unchanged; new
//! log-stds are log(1e-2).
ComponentAddition add_component(const Mdn& net, const Observation& obs, std::uint64_t seed,
                                double noise = 1e-2);

//! Carries a weight prior over to a grown network: copied entries keep
//! their prior, new ones get mean = current value and std `new_std`.
DiagGaussian expand_weight_prior(const ComponentAddition& grown, const DiagGaussian& prior,
                                 double new_std);

// -- checkpoints ----------------------------------------------------------------------

//! One JSON header line followed by little-endian float64 arrays.
void save_mdn(const Mdn& net, const std::filesystem::path& path);
Mdn load_mdn(const std::filesystem::path& path);

nlohmann::json to_json(const MdnArchitecture& a);
MdnArchitecture architecture_from_json(const nlohmann::json& j);

//! Shared binary checkpoint helpers (also used by the guard).
void write_checkpoint(const std::filesystem::path& path, nlohmann::json header,
                      const std::vector<std::pair<std::string, const Vec*>>& arrays);
std::pair<nlohmann::json, std::vector<Vec>> read_checkpoint(const std::filesystem::path& path);

} // namespace snpe
