#pragma once

#include "snpe/common.hpp"

#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

namespace snpe {

//! A named, shaped region of a flat parameter vector. Matrices are stored
//! column-major, like Eigen.
struct ParamSlice {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 1;
  Index size() const { return rows * cols; }
};

//! Flat parameter vector plus its layout. Slices are contiguous, appended in
//! order, and cover the vector exactly.
class ParamStore {
public:
  ParamStore() = default;

  //! Append a rows x cols slice initialised to zero; returns its offset.
  Index add(std::string name, Index rows, Index cols = 1);

  const Vec& values() const { return values_; }
  Vec& values() { return values_; }
  const std::vector<ParamSlice>& layout() const { return layout_; }
  Index size() const { return values_.size(); }

  bool has(const std::string& name) const;
  const ParamSlice& slice(const std::string& name) const;

  Eigen::Map<Mat> block(const std::string& name);
  Eigen::Map<const Mat> block(const std::string& name) const;

  //! Throws NonFiniteOutput if any value is NaN/Inf, or FormatError if the
  //! layout does not tile the vector.
  void validate() const;

private:
  Vec values_;
  std::vector<ParamSlice> layout_;
};

struct GradReport {
  double loss = 0.0;
  Vec grad;
};

//! Anything that maps (flat params, batch, seed) to a loss and its gradient.
template <class M, class Batch>
concept DifferentiableModel =
    requires(const M& m, const Vec& p, const Batch& b, std::uint64_t s) {
      { m.evaluate(p, b, s) } -> std::convertible_to<GradReport>;
      { m.loss(p, b, s) } -> std::convertible_to<double>;
    };

//! Evaluate loss and gradient; throws NonFiniteLoss on NaN/Inf.
template <class M, class Batch>
  requires DifferentiableModel<M, Batch>
GradReport value_and_grad(const M& model, const ParamStore& params,
                          const Batch& batch, std::uint64_t seed) {
  GradReport r = model.evaluate(params.values(), batch, seed);
  if (!std::isfinite(r.loss) || !r.grad.allFinite())
    throw NonFiniteLoss("loss or gradient is not finite");
  if (r.grad.size() != params.size())
    throw DimensionMismatch("gradient length differs from parameter count");
  return r;
}

//! Central finite differences of model.loss at params (same seed).
template <class M, class Batch>
  requires DifferentiableModel<M, Batch>
Vec finite_difference_grad(const M& model, const Vec& params,
                           const Batch& batch, std::uint64_t seed,
                           double step = 1e-5) {
  Vec g(params.size());
  Vec p = params;
  for (Index i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double up = model.loss(p, batch, seed);
    p[i] = orig - step;
    const double down = model.loss(p, batch, seed);
    p[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

//! Largest componentwise relative error |a-b|/max(|a|,|b|) over components
//! where either value exceeds `floor` in magnitude.
double max_relative_error(const Vec& analytic, const Vec& numeric,
                          double floor = 1e-6);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  Vec first_moment;
  Vec second_moment;
  long step = 0;

  AdamState() = default;
  AdamState(Index n, AdamConfig cfg)
      : config(cfg), first_moment(Vec::Zero(n)), second_moment(Vec::Zero(n)) {}
};

//! One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, Vec& params, const Vec& grad);

//! Rescale so that the Euclidean norm does not exceed `threshold`.
Vec clip_global_norm(const Vec& grad, double threshold);

} // namespace snpe
