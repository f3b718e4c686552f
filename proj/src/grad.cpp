#include "snpe/grad.hpp"

#include <algorithm>
#include <cmath>

namespace snpe {

Index ParamStore::add(std::string name, Index rows, Index cols) {
  if (has(name))
    throw FormatError("duplicate parameter slice '" + name + "'");
  const Index offset = values_.size();
  layout_.push_back({std::move(name), offset, rows, cols});
  values_.conservativeResize(offset + rows * cols);
  values_.segment(offset, rows * cols).setZero();
  return offset;
}

bool ParamStore::has(const std::string& name) const {
  return std::any_of(layout_.begin(), layout_.end(),
                     [&](const ParamSlice& s) { return s.name == name; });
}

const ParamSlice& ParamStore::slice(const std::string& name) const {
  for (const auto& s : layout_)
    if (s.name == name)
      return s;
  throw FormatError("unknown parameter slice '" + name + "'");
}

Eigen::Map<Mat> ParamStore::block(const std::string& name) {
  const auto& s = slice(name);
  return {values_.data() + s.offset, s.rows, s.cols};
}

Eigen::Map<const Mat> ParamStore::block(const std::string& name) const {
  const auto& s = slice(name);
  return {values_.data() + s.offset, s.rows, s.cols};
}

void ParamStore::validate() const {
  Index expected = 0;
  for (const auto& s : layout_) {
    if (s.offset != expected)
      throw FormatError("parameter layout has a gap or overlap at '" + s.name + "'");
    expected += s.size();
  }
  if (expected != values_.size())
    throw FormatError("parameter layout does not cover the vector");
  if (!values_.allFinite())
    throw NonFiniteOutput("parameter vector contains non-finite values");
}

double max_relative_error(const Vec& analytic, const Vec& numeric,
                          double floor) {
  require_dim(numeric.size(), analytic.size(), "max_relative_error");
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    if (scale <= floor)
      continue;
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

void adam_step(AdamState& state, Vec& params, const Vec& grad) {
  require_dim(grad.size(), params.size(), "adam_step");
  if (state.first_moment.size() != params.size()) {
    state.first_moment = Vec::Zero(params.size());
    state.second_moment = Vec::Zero(params.size());
  }
  const auto& c = state.config;
  ++state.step;
  state.first_moment = c.beta1 * state.first_moment + (1.0 - c.beta1) * grad;
  state.second_moment =
      c.beta2 * state.second_moment + (1.0 - c.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  params.array() -= c.learning_rate * (state.first_moment.array() / bc1) /
                    ((state.second_moment.array() / bc2).sqrt() + c.epsilon);
}

Vec clip_global_norm(const Vec& grad, double threshold) {
  if (!(threshold > 0.0))
    throw Error("clip_global_norm: threshold must be positive");
  const double norm = grad.norm();
  if (norm <= threshold)
    return grad;
  return grad * (threshold / norm);
}

} // namespace snpe
