#include "snpe/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace snpe {

FeatureVector FeatureVector::all_missing(Index n, bool bad) {
  return {Vec::Constant(n, kMissingSentinel), Vec::Ones(n), bad};
}

std::vector<std::string> HhFeatureOptions::names(const HhFeatureOptions& o) {
  std::vector<std::string> n{"spike_count", "resting_potential"};
  for (int l = 1; l <= o.lags; ++l)
    n.push_back("autocorr_" + std::to_string(l));
  n.push_back("mean");
  n.push_back("variance");
  for (int k = 3; k <= 8; ++k)
    n.push_back("moment_" + std::to_string(k));
  if (o.include_latency)
    n.push_back("latency");
  return n;
}

std::vector<Index> detect_spikes(const Vec& v, double dt, double threshold,
                                 double refractory) {
  std::vector<Index> spikes;
  const Index dead = static_cast<Index>(std::ceil(refractory / dt));
  Index last = -dead - 1;
  for (Index i = 1; i < v.size(); ++i) {
    if (v[i - 1] < threshold && v[i] >= threshold && i - last > dead) {
      spikes.push_back(i);
      last = i;
    }
  }
  return spikes;
}

FeatureVector hh_features(const Trace& trace, bool bad, const HhFeatureOptions& opt) {
  const Index n_f = opt.size();
  if (bad || !trace.signal.allFinite())
    return FeatureVector::all_missing(n_f, true);

  FeatureVector f{Vec::Zero(n_f), Vec::Zero(n_f), false};
  const double dt = trace.dt;
  const Vec& v = trace.signal;
  auto index_of = [&](double t) {
    return std::clamp<Index>(static_cast<Index>(std::llround(t / dt)), 0, v.size());
  };
  const Index on = index_of(opt.onset);
  const Index off = std::max(on, index_of(opt.offset));

  const auto spikes = detect_spikes(v, dt, opt.spike_threshold, opt.refractory);
  f.values[0] = static_cast<double>(spikes.size());

  if (on > 0)
    f.values[1] = v.head(on).mean();
  else
    f.mask[1] = 1;

  const Index win = off - on;
  const Vec seg = v.segment(on, win);
  const double mu = win > 0 ? seg.mean() : 0.0;
  const Vec centred = seg.array() - mu;
  const double var = win > 0 ? centred.squaredNorm() / static_cast<double>(win) : 0.0;
  const bool flat = !(var > 1e-12);

  Index k = 2;
  for (int l = 1; l <= opt.lags; ++l, ++k) {
    const Index lag = static_cast<Index>(std::llround(l * opt.lag_spacing / dt));
    if (flat || lag >= win) {
      f.mask[k] = 1;
      continue;
    }
    const double cov = centred.head(win - lag).dot(centred.tail(win - lag)) /
                       static_cast<double>(win);
    f.values[k] = cov / var;
  }

  if (win > 0)
    f.values[k] = mu;
  else
    f.mask[k] = 1;
  ++k;
  if (win > 0)
    f.values[k] = var;
  else
    f.mask[k] = 1;
  ++k;
  const double sd = std::sqrt(var);
  for (int order = 3; order <= 8; ++order, ++k) {
    if (flat) {
      f.mask[k] = 1;
      continue;
    }
    const double m = (centred.array() / sd).pow(order).mean();
    f.values[k] = m;
  }

  if (opt.include_latency) {
    auto first = std::find_if(spikes.begin(), spikes.end(), [&](Index i) { return i >= on; });
    if (first == spikes.end())
      f.mask[k] = 1;
    else
      f.values[k] = static_cast<double>(*first - on) * dt;
  }
  for (Index i = 0; i < n_f; ++i)
    if (f.mask[i] != 0)
      f.values[i] = kMissingSentinel;
  return f;
}

FeatureVector glm_features(const Vec& spikes, const GlmSpec& spec) {
  require_dim(spikes.size(), spec.bins, "glm_features");
  FeatureVector f;
  f.values = spec.design.transpose() * spikes / static_cast<double>(spec.bins);
  f.mask = Vec::Zero(spec.filter_length);
  return f;
}

FeatureVector gm_features(const Vec& samples) {
  if (samples.size() == 0)
    throw Error("gm_features: empty sample set");
  if (samples.size() == 1)
    return {samples, Vec::Zero(1), false};
  const Index n = samples.size();
  FeatureVector f{Vec::Zero(11), Vec::Zero(11), false};
  const double mu = samples.mean();
  const double var = (samples.array() - mu).square().sum() / static_cast<double>(n - 1);
  f.values[0] = mu;
  if (var > 0.0)
    f.values[1] = std::log(var);
  else
    f.mask[1] = 1;
  std::vector<double> sorted(samples.data(), samples.data() + n);
  std::sort(sorted.begin(), sorted.end());
  for (int q = 1; q <= 9; ++q) {
    // linear interpolation between order statistics
    const double pos = q / 10.0 * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min<std::size_t>(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    f.values[1 + q] = sorted[lo] + frac * (sorted[hi] - sorted[lo]);
  }
  return f;
}

FeatureVector autapse_features(const SimOutput& sim) {
  if (sim.bad || !sim.trace.signal.allFinite())
    return FeatureVector::all_missing(1, true);
  return {Vec::Constant(1, sim.trace.signal.mean()), Vec::Zero(1), false};
}

void write_feature_table(const std::vector<FeatureRow>& rows,
                         const std::vector<std::string>& theta_names,
                         const std::vector<std::string>& feature_names,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out)
    throw FormatError("cannot write " + path.string());
  out.imbue(std::locale::classic());
  out << std::setprecision(17);
  out << "# snpekit feature table v" << kFeatureTableVersion << '\n';
  out << "id,bad";
  for (const auto& n : theta_names)
    out << ',' << n;
  for (const auto& n : feature_names)
    out << ',' << n;
  for (const auto& n : feature_names)
    out << ",mask_" << n;
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i << ',' << (r.features.bad ? 1 : 0);
    for (Index j = 0; j < r.theta.size(); ++j)
      out << ',' << r.theta[j];
    for (Index j = 0; j < r.features.size(); ++j)
      out << ',' << r.features.values[j];
    for (Index j = 0; j < r.features.size(); ++j)
      out << ',' << static_cast<int>(r.features.mask[j]);
    out << '\n';
  }
}

// -- GRU ----------------------------------------------------------------------

namespace {

struct GruView {
  Eigen::Map<const Mat> wz, uz, wr, ur, wc, uc;
  Eigen::Map<const Vec> bz, br, bc;
};

GruView gru_view(const GruShape& s, const double* p) {
  const Index ui = s.units * s.inputs, uu = s.units * s.units, u = s.units;
  const double* q = p;
  auto take = [&q](Index n) {
    const double* at = q;
    q += n;
    return at;
  };
  const double* wz = take(ui);
  const double* uz = take(uu);
  const double* bz = take(u);
  const double* wr = take(ui);
  const double* ur = take(uu);
  const double* br = take(u);
  const double* wc = take(ui);
  const double* uc = take(uu);
  const double* bc = take(u);
  return {{wz, u, s.inputs}, {uz, u, u}, {wr, u, s.inputs}, {ur, u, u}, {wc, u, s.inputs},
          {uc, u, u},        {bz, u},    {br, u},           {bc, u}};
}

Mat sigmoid(const Mat& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

} // namespace

Mat gru_forward(const GruShape& shape, const double* params, const std::vector<Mat>& steps,
                GruTape* tape) {
  if (steps.empty())
    throw Error("gru_forward: empty sequence");
  const auto w = gru_view(shape, params);
  const Index batch = steps.front().cols();
  Mat h = Mat::Zero(shape.units, batch);
  if (tape) {
    *tape = GruTape{};
    tape->h.reserve(steps.size() + 1);
    tape->h.push_back(h);
  }
  for (const Mat& x : steps) {
    require_dim(x.rows(), shape.inputs, "gru_forward");
    const Mat z = sigmoid((w.wz * x + w.uz * h).colwise() + w.bz);
    const Mat r = sigmoid((w.wr * x + w.ur * h).colwise() + w.br);
    const Mat c = ((w.wc * x + w.uc * r.cwiseProduct(h)).colwise() + w.bc).array().tanh().matrix();
    h = h + z.cwiseProduct(c - h);
    if (tape) {
      tape->z.push_back(z);
      tape->r.push_back(r);
      tape->cand.push_back(c);
      tape->x.push_back(x);
      tape->h.push_back(h);
    }
  }
  if (!h.allFinite())
    throw NonFiniteOutput("GRU hidden state is not finite");
  return h;
}

void gru_backward(const GruShape& shape, const double* params, const GruTape& tape,
                  const Mat& d_final, double* grad) {
  const auto w = gru_view(shape, params);
  const Index u = shape.units, in = shape.inputs;
  Mat dwz = Mat::Zero(u, in), duz = Mat::Zero(u, u), dwr = Mat::Zero(u, in),
      dur = Mat::Zero(u, u), dwc = Mat::Zero(u, in), duc = Mat::Zero(u, u);
  Vec dbz = Vec::Zero(u), dbr = Vec::Zero(u), dbc = Vec::Zero(u);

  Mat dh = d_final;
  for (std::size_t t = tape.z.size(); t-- > 0;) {
    const Mat& h = tape.h[t];
    const Mat& z = tape.z[t];
    const Mat& r = tape.r[t];
    const Mat& c = tape.cand[t];
    const Mat& x = tape.x[t];
    const Mat da_z = (dh.cwiseProduct(c - h)).cwiseProduct(z.cwiseProduct((1.0 - z.array()).matrix()));
    const Mat da_c = (dh.cwiseProduct(z)).cwiseProduct((1.0 - c.array().square()).matrix());
    const Mat rh = r.cwiseProduct(h);
    const Mat d_rh = w.uc.transpose() * da_c;
    const Mat da_r = d_rh.cwiseProduct(h).cwiseProduct(r.cwiseProduct((1.0 - r.array()).matrix()));

    dwz.noalias() += da_z * x.transpose();
    duz.noalias() += da_z * h.transpose();
    dbz += da_z.rowwise().sum();
    dwr.noalias() += da_r * x.transpose();
    dur.noalias() += da_r * h.transpose();
    dbr += da_r.rowwise().sum();
    dwc.noalias() += da_c * x.transpose();
    duc.noalias() += da_c * rh.transpose();
    dbc += da_c.rowwise().sum();

    Mat dh_prev = dh.cwiseProduct((1.0 - z.array()).matrix()) + d_rh.cwiseProduct(r);
    dh_prev.noalias() += w.uz.transpose() * da_z;
    dh_prev.noalias() += w.ur.transpose() * da_r;
    dh = std::move(dh_prev);
  }

  double* q = grad;
  auto put = [&q](const auto& m) {
    Eigen::Map<Mat>(q, m.rows(), m.cols()) += m;
    q += m.size();
  };
  put(dwz);
  put(duz);
  put(dbz);
  put(dwr);
  put(dur);
  put(dbr);
  put(dwc);
  put(duc);
  put(dbc);
}

Vec gru_forward(const GruShape& shape, const Vec& params, const Mat& sequence) {
  require_dim(params.size(), shape.param_count(), "gru_forward");
  std::vector<Mat> steps;
  steps.reserve(static_cast<std::size_t>(sequence.cols()));
  for (Index t = 0; t < sequence.cols(); ++t)
    steps.emplace_back(sequence.col(t));
  return gru_forward(shape, params.data(), steps);
}

Mat trace_to_sequence(const Trace& trace, Index stride, double v_center, double v_scale,
                      double stimulus_scale) {
  if (stride < 1)
    throw Error("trace_to_sequence: stride must be >= 1");
  const Index n = trace.steps() / stride;
  Mat seq(2, n);
  for (Index t = 0; t < n; ++t) {
    seq(0, t) = (trace.signal.segment(t * stride, stride).mean() - v_center) / v_scale;
    const double stim = trace.stimulus.size() >= (t + 1) * stride
                            ? trace.stimulus.segment(t * stride, stride).mean()
                            : 0.0;
    seq(1, t) = stim / stimulus_scale;
  }
  return seq;
}

} // namespace snpe
