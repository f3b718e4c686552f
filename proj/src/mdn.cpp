#include "snpe/mdn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace snpe {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m))
    return m;
  return m + std::log((v.array() - m).exp().sum());
}

Index tri_size(Index d) { return d * (d + 1) / 2; }

// Row offsets inside the output head.
struct HeadIndex {
  Index K, d;
  Index logit(Index k) const { return k; }
  Index mean(Index k) const { return K + k * d; }
  Index chol(Index k) const { return K + K * d + k * tri_size(d); }
};

void fill_factor(const double* o, Index d, Mat& U) {
  U.setZero(d, d);
  for (Index i = 0; i < d; ++i)
    U(i, i) = std::exp(o[i]);
  Index idx = d;
  for (Index i = 0; i < d; ++i)
    for (Index j = i + 1; j < d; ++j)
      U(i, j) = o[idx++];
}

struct HeadWork {
  Mat U;
  Vec delta, z, logn, logits;
  std::vector<Mat> us;
  std::vector<Vec> zs, deltas;
};

// log q(theta | o) in standardised space. If grad is non-null, adds
// g * d log q / d o into it.
double head_log_density(const double* o, const double* theta, const HeadIndex& hi,
                        HeadWork& w, double* grad, double g) {
  const Index K = hi.K, d = hi.d;
  w.logn.resize(K);
  w.logits.resize(K);
  w.us.resize(K);
  w.zs.resize(K);
  w.deltas.resize(K);
  Eigen::Map<const Vec> th(theta, d);
  for (Index k = 0; k < K; ++k) {
    Mat& U = w.us[k];
    fill_factor(o + hi.chol(k), d, U);
    w.deltas[k] = th - Eigen::Map<const Vec>(o + hi.mean(k), d);
    w.zs[k] = U.triangularView<Eigen::Upper>() * w.deltas[k];
    w.logn[k] = -0.5 * static_cast<double>(d) * kLog2Pi +
                U.diagonal().array().log().sum() - 0.5 * w.zs[k].squaredNorm();
    w.logits[k] = o[hi.logit(k)];
  }
  const Vec joint = w.logits + w.logn;
  const double lse_joint = log_sum_exp(joint);
  const double lse_a = log_sum_exp(w.logits);
  const double logq = lse_joint - lse_a;
  if (grad && g != 0.0) {
    for (Index k = 0; k < K; ++k) {
      const double gamma = std::exp(joint[k] - lse_joint);
      const double alpha = std::exp(w.logits[k] - lse_a);
      grad[hi.logit(k)] += g * (gamma - alpha);
      const Mat& U = w.us[k];
      const Vec dmu = U.triangularView<Eigen::Upper>().transpose() * w.zs[k];
      Eigen::Map<Vec>(grad + hi.mean(k), d) += g * gamma * dmu;
      double* gc = grad + hi.chol(k);
      const Vec& z = w.zs[k];
      const Vec& delta = w.deltas[k];
      for (Index i = 0; i < d; ++i) {
        // d U_ii / d raw = U_ii
        const double dU = 1.0 - z[i] * delta[i] * U(i, i);
        gc[i] += g * gamma * dU;
      }
      Index idx = d;
      for (Index i = 0; i < d; ++i)
        for (Index j = i + 1; j < d; ++j)
          gc[idx++] += g * gamma * (-z[i] * delta[j]);
    }
  }
  return logq;
}

Mat activate(const Mat& z, Activation a) {
  if (a == Activation::Tanh)
    return z.array().tanh().matrix();
  return z.cwiseMax(0.0);
}

// derivative expressed through the activation output
Mat activation_grad(const Mat& a, Activation act) {
  if (act == Activation::Tanh)
    return (1.0 - a.array().square()).matrix();
  return (a.array() > 0.0).cast<double>().matrix();
}

struct DenseTape {
  std::vector<Mat> inputs; // input to each layer
  std::vector<Mat> eps, sd;
};

Mat dense_forward(const Mdn& net, const Vec& p, const Mat& a0, bool sample, Rng* rng,
                  DenseTape* tape) {
  const bool reparam = sample && net.arch.bayesian;
  Mat a = a0;
  const Index L = static_cast<Index>(net.layers.size());
  for (Index l = 0; l < L; ++l) {
    const auto& ly = net.layers[l];
    Eigen::Map<const Mat> wm(p.data() + net.mean_offset + ly.w, ly.out, ly.in);
    Eigen::Map<const Vec> bm(p.data() + net.mean_offset + ly.b, ly.out);
    Mat z = wm * a;
    z.colwise() += bm;
    if (reparam) {
      const Mat ws2 = Eigen::Map<const Mat>(p.data() + net.logstd_offset + ly.w, ly.out, ly.in)
                          .array()
                          .exp()
                          .square()
                          .matrix();
      const Vec bs2 =
          Eigen::Map<const Vec>(p.data() + net.logstd_offset + ly.b, ly.out).array().exp().square().matrix();
      Mat v = ws2 * a.array().square().matrix();
      v.colwise() += bs2;
      Mat sd = v.array().sqrt().matrix();
      Mat eps = standard_normal_mat(*rng, ly.out, a.cols());
      z += sd.cwiseProduct(eps);
      if (tape) {
        tape->eps.push_back(std::move(eps));
        tape->sd.push_back(std::move(sd));
      }
    }
    if (tape)
      tape->inputs.push_back(a);
    a = (l + 1 < L) ? activate(z, net.arch.activation) : std::move(z);
  }
  return a;
}

// Returns dLoss/d(input of layer 0).
Mat dense_backward(const Mdn& net, const Vec& p, const DenseTape& tape, bool sample, Mat g,
                   Vec& grad) {
  const bool reparam = sample && net.arch.bayesian;
  const Index L = static_cast<Index>(net.layers.size());
  for (Index l = L - 1; l >= 0; --l) {
    const auto& ly = net.layers[l];
    const Mat& a = tape.inputs[l];
    Eigen::Map<const Mat> wm(p.data() + net.mean_offset + ly.w, ly.out, ly.in);
    Eigen::Map<Mat>(grad.data() + net.mean_offset + ly.w, ly.out, ly.in).noalias() += g * a.transpose();
    Eigen::Map<Vec>(grad.data() + net.mean_offset + ly.b, ly.out) += g.rowwise().sum();
    Mat da = wm.transpose() * g;
    if (reparam) {
      const Mat ws2 = Eigen::Map<const Mat>(p.data() + net.logstd_offset + ly.w, ly.out, ly.in)
                          .array()
                          .exp()
                          .square()
                          .matrix();
      const Vec bs2 =
          Eigen::Map<const Vec>(p.data() + net.logstd_offset + ly.b, ly.out).array().exp().square().matrix();
      const Mat dv = (g.array() * tape.eps[l].array() / (2.0 * tape.sd[l].array())).matrix();
      const Mat a2 = a.array().square().matrix();
      // d/d log s of s^2 is 2 s^2
      Eigen::Map<Mat>(grad.data() + net.logstd_offset + ly.w, ly.out, ly.in) +=
          (2.0 * ws2.array() * (dv * a2.transpose()).array()).matrix();
      Eigen::Map<Vec>(grad.data() + net.logstd_offset + ly.b, ly.out) +=
          (2.0 * bs2.array() * dv.rowwise().sum().array()).matrix();
      da += 2.0 * a.cwiseProduct(ws2.transpose() * dv);
    }
    if (l == 0)
      return da;
    g = da.cwiseProduct(activation_grad(a, net.arch.activation));
  }
  return g;
}

Mat network_input(const Mdn& net, const Vec& p, const Mat& x, const Mat& mask) {
  Mat xs = net.x_norm.apply(x);
  if (mask.size() == 0)
    return xs;
  require_dim(mask.rows(), x.rows(), "mask rows");
  require_dim(mask.cols(), x.cols(), "mask cols");
  Mat h = xs.cwiseProduct((1.0 - mask.array()).matrix());
  if (net.arch.impute) {
    Eigen::Map<const Vec> c(p.data() + net.c_offset, net.c_size);
    h += (mask.array().colwise() * c.array()).matrix();
  }
  return h;
}

std::vector<Mat> single_steps(const Mat& sequence) {
  std::vector<Mat> steps;
  for (Index t = 0; t < sequence.cols(); ++t)
    steps.emplace_back(sequence.col(t));
  return steps;
}

Mat batch_input(const Mdn& net, const Vec& p, const MdnBatch& b, GruTape* tape) {
  if (net.arch.gru) {
    if (b.steps.empty())
      throw DimensionMismatch("GRU network needs sequence input");
    require_dim(b.steps.front().cols(), b.size(), "sequence batch");
    return gru_forward(*net.arch.gru, p.data() + net.gru_offset, b.steps, tape);
  }
  require_dim(b.x.rows(), net.arch.n_features, "feature dimension");
  require_dim(b.x.cols(), b.size(), "feature batch");
  return network_input(net, p, b.x, b.mask);
}

Mat standardise_theta(const Mdn& net, const Mat& theta) {
  require_dim(theta.rows(), net.arch.theta_dim, "theta dimension");
  return net.theta_norm.apply(theta);
}

double theta_log_jacobian(const Mdn& net) { return net.theta_norm.scale.array().log().sum(); }

} // namespace

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh")
    return Activation::Tanh;
  if (s == "relu")
    return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

Index MdnArchitecture::head_size() const {
  return components + components * theta_dim + components * tri_size(theta_dim);
}

void MdnArchitecture::validate() const {
  if (components < 1)
    throw ConfigError("mdn: components must be >= 1");
  if (theta_dim < 1)
    throw ConfigError("mdn: theta dimension must be >= 1");
  if (!gru && n_features < 1)
    throw ConfigError("mdn: need at least one feature");
  for (Index h : hidden)
    if (h < 1)
      throw ConfigError("mdn: hidden sizes must be >= 1");
  if (gru && impute)
    throw ConfigError("mdn: imputation applies to hand-designed features only");
}

Standardizer Standardizer::identity(Index n) { return {Vec::Zero(n), Vec::Ones(n)}; }

Standardizer Standardizer::fit(const Mat& data, const Mat& mask) {
  const Index n = data.rows();
  Standardizer s{Vec::Zero(n), Vec::Ones(n)};
  for (Index i = 0; i < n; ++i) {
    double sum = 0.0, sq = 0.0, count = 0.0;
    for (Index j = 0; j < data.cols(); ++j) {
      if (mask.size() != 0 && mask(i, j) != 0.0)
        continue;
      sum += data(i, j);
      count += 1.0;
    }
    if (count < 1.0)
      continue;
    const double mu = sum / count;
    for (Index j = 0; j < data.cols(); ++j) {
      if (mask.size() != 0 && mask(i, j) != 0.0)
        continue;
      sq += (data(i, j) - mu) * (data(i, j) - mu);
    }
    const double sd = count > 1.0 ? std::sqrt(sq / (count - 1.0)) : 0.0;
    s.shift[i] = mu;
    s.scale[i] = sd > 1e-8 * std::max(1.0, std::abs(mu)) ? sd : 1.0;
  }
  return s;
}

Mat Standardizer::apply(const Mat& x) const {
  require_dim(x.rows(), size(), "standardizer");
  return ((x.colwise() - shift).array().colwise() / scale.array()).matrix();
}

Eigen::Map<const Vec> Mdn::dense_means(const Vec& p) const {
  return {p.data() + mean_offset, dense_size};
}

Eigen::Map<const Vec> Mdn::dense_logstds(const Vec& p) const {
  if (!arch.bayesian)
    throw Error("point-weight network has no weight distribution");
  return {p.data() + logstd_offset, dense_size};
}

DiagGaussian Mdn::weight_posterior(const Vec& p) const {
  return {dense_means(p), dense_logstds(p).array().exp().matrix()};
}

Mdn make_mdn(const MdnArchitecture& arch, Standardizer x_norm, Standardizer theta_norm,
             std::uint64_t seed) {
  arch.validate();
  Mdn net;
  net.arch = arch;
  if (x_norm.size() == 0)
    x_norm = Standardizer::identity(arch.n_features);
  if (theta_norm.size() == 0)
    theta_norm = Standardizer::identity(arch.theta_dim);
  if (!arch.gru)
    require_dim(x_norm.size(), arch.n_features, "feature standardizer");
  require_dim(theta_norm.size(), arch.theta_dim, "theta standardizer");
  net.x_norm = std::move(x_norm);
  net.theta_norm = std::move(theta_norm);

  auto& ps = net.params;
  if (arch.impute) {
    net.c_size = arch.n_features;
    net.c_offset = ps.add("impute.c", arch.n_features);
  }
  if (arch.gru) {
    net.gru_size = arch.gru->param_count();
    net.gru_offset = ps.add("gru", net.gru_size);
  }
  std::vector<Index> sizes{arch.input_size()};
  sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
  sizes.push_back(arch.head_size());

  net.mean_offset = ps.size();
  Index rel = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Mdn::Layer ly{sizes[l], sizes[l + 1], 0, 0};
    ly.w = ps.add("layer" + std::to_string(l) + ".W.mean", ly.out, ly.in) - net.mean_offset;
    ly.b = ps.add("layer" + std::to_string(l) + ".b.mean", ly.out) - net.mean_offset;
    rel = ly.b + ly.out;
    net.layers.push_back(ly);
  }
  net.dense_size = rel;
  net.logstd_offset = ps.size();
  if (arch.bayesian)
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto& ly = net.layers[l];
      ps.add("layer" + std::to_string(l) + ".W.logstd", ly.out, ly.in);
      ps.add("layer" + std::to_string(l) + ".b.logstd", ly.out);
    }

  Rng rng(seed);
  Vec& v = ps.values();
  for (const auto& ly : net.layers) {
    const double bound = std::sqrt(3.0 / static_cast<double>(ly.in));
    for (Index i = 0; i < ly.in * ly.out; ++i)
      v[net.mean_offset + ly.w + i] = bound * (2.0 * uniform01(rng) - 1.0);
  }
  if (arch.bayesian)
    v.segment(net.logstd_offset, net.dense_size).setConstant(kInitLogStd);
  if (arch.gru) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.gru->units));
    for (Index i = 0; i < net.gru_size; ++i)
      v[net.gru_offset + i] = bound * (2.0 * uniform01(rng) - 1.0);
  }
  ps.validate();
  return net;
}

GaussianMixture forward(const Mdn& net, const Vec& p, const Observation& obs) {
  require_dim(p.size(), net.size(), "parameter vector");
  Mat a0;
  if (net.arch.gru) {
    a0 = gru_forward(*net.arch.gru, p.data() + net.gru_offset, single_steps(obs.sequence));
  } else {
    require_dim(obs.x.size(), net.arch.n_features, "feature dimension");
    Mat mask;
    if (obs.mask.size() != 0) {
      require_dim(obs.mask.size(), obs.x.size(), "mask dimension");
      mask = obs.mask;
    }
    a0 = network_input(net, p, obs.x, mask);
  }
  const Vec o = dense_forward(net, p, a0, false, nullptr, nullptr);
  if (!o.allFinite())
    throw NonFiniteOutput("network output is not finite");

  const Index K = net.arch.components, d = net.arch.theta_dim;
  const HeadIndex hi{K, d};
  Vec logits(K);
  for (Index k = 0; k < K; ++k)
    logits[k] = o[hi.logit(k)];
  Vec w = (logits.array() - log_sum_exp(logits)).exp().matrix();
  w /= w.sum();
  std::vector<Vec> means;
  std::vector<Mat> chols;
  Mat U;
  for (Index k = 0; k < K; ++k) {
    means.emplace_back(o.segment(hi.mean(k), d));
    fill_factor(o.data() + hi.chol(k), d, U);
    const Mat uinv = U.triangularView<Eigen::Upper>().solve(Mat::Identity(d, d));
    Eigen::LLT<Mat> llt(uinv * uinv.transpose());
    if (llt.info() != Eigen::Success || !llt.matrixL().toDenseMatrix().allFinite())
      throw NonFiniteOutput("component covariance is not positive definite");
    chols.emplace_back(llt.matrixL());
  }
  GaussianMixture std_mix(std::move(w), std::move(means), std::move(chols));
  return affine(std_mix, net.theta_norm.shift, net.theta_norm.scale);
}

GaussianMixture extract_posterior(const Mdn& net, const Observation& obs) {
  return forward(net, net.params.values(), obs);
}

Vec sample_network(const Mdn& net, Rng& rng) {
  Vec p = net.params.values();
  if (!net.arch.bayesian)
    return p;
  const Vec sd = net.dense_logstds(p).array().exp().matrix();
  for (Index i = 0; i < net.dense_size; ++i)
    p[net.mean_offset + i] += sd[i] * standard_normal(rng);
  return p;
}

GradReport mdn_objective(const Mdn& net, const Vec& p, const MdnBatch& batch,
                         const ObjectiveOptions& opt, std::uint64_t seed, bool want_grad) {
  require_dim(p.size(), net.size(), "parameter vector");
  const Index B = batch.size();
  if (B < 1)
    throw Error("empty batch");
  require_dim(batch.weight.size(), B, "batch weights");
  const bool sample = opt.reparameterise && net.arch.bayesian;

  GruTape gru_tape;
  const Mat a0 = batch_input(net, p, batch, want_grad && net.arch.gru ? &gru_tape : nullptr);
  Rng rng(seed);
  DenseTape tape;
  const Mat out = dense_forward(net, p, a0, sample, &rng, want_grad ? &tape : nullptr);
  const Mat theta = standardise_theta(net, batch.theta);

  GradReport r;
  r.grad = Vec::Zero(want_grad ? p.size() : 0);
  Mat d_out = want_grad ? Mat::Zero(out.rows(), out.cols()) : Mat();
  const HeadIndex hi{net.arch.components, net.arch.theta_dim};
  HeadWork work;
  const double log_jac = theta_log_jacobian(net);
  const double coef = opt.data_scale / static_cast<double>(B);
  double data_loss = 0.0;
  for (Index n = 0; n < B; ++n) {
    const double wn = batch.weight[n];
    if (wn == 0.0)
      continue;
    const double g = -coef * wn;
    const double logq = head_log_density(out.col(n).data(), theta.col(n).data(), hi, work,
                                         want_grad ? d_out.col(n).data() : nullptr, g) -
                        log_jac;
    data_loss += g * logq;
  }
  r.loss = data_loss;

  if (opt.weight_prior && net.arch.bayesian && opt.prior_scale != 0.0) {
    const DiagGaussian& prior = *opt.weight_prior;
    require_dim(prior.dim(), net.dense_size, "weight prior");
    const DiagGaussian post = net.weight_posterior(p);
    r.loss += opt.prior_scale * kl_diag_gaussians(post, prior);
    if (want_grad) {
      const Vec v_old = prior.std.array().square().matrix();
      const Vec v_new = post.std.array().square().matrix();
      r.grad.segment(net.mean_offset, net.dense_size) +=
          opt.prior_scale * ((post.mean - prior.mean).array() / v_old.array()).matrix();
      r.grad.segment(net.logstd_offset, net.dense_size) +=
          opt.prior_scale * (v_new.array() / v_old.array() - 1.0).matrix();
    }
  }
  if (opt.point_precision > 0.0 && opt.prior_scale != 0.0) {
    const double s = opt.prior_scale * opt.point_precision;
    for (auto [off, len] : {std::pair{net.c_offset, net.c_size}, std::pair{net.gru_offset, net.gru_size}}) {
      if (len == 0)
        continue;
      r.loss += 0.5 * s * p.segment(off, len).squaredNorm();
      if (want_grad)
        r.grad.segment(off, len) += s * p.segment(off, len);
    }
  }

  if (!std::isfinite(r.loss))
    throw NonFiniteLoss("MDN loss is not finite");
  if (!want_grad)
    return r;

  const Mat d_in = dense_backward(net, p, tape, sample, std::move(d_out), r.grad);
  if (net.arch.gru) {
    gru_backward(*net.arch.gru, p.data() + net.gru_offset, gru_tape, d_in,
                 r.grad.data() + net.gru_offset);
  } else if (net.arch.impute && batch.mask.size() != 0) {
    r.grad.segment(net.c_offset, net.c_size) += d_in.cwiseProduct(batch.mask).rowwise().sum();
  }
  return r;
}

double mdn_log_loss(const Mdn& net, const Vec& p, const MdnBatch& batch) {
  ObjectiveOptions opt;
  opt.reparameterise = false;
  return mdn_objective(net, p, batch, opt, 0, false).loss;
}

Vec mdn_log_density(const Mdn& net, const Vec& p, const MdnBatch& batch) {
  const Mat a0 = batch_input(net, p, batch, nullptr);
  const Mat out = dense_forward(net, p, a0, false, nullptr, nullptr);
  const Mat theta = standardise_theta(net, batch.theta);
  const HeadIndex hi{net.arch.components, net.arch.theta_dim};
  HeadWork work;
  Vec lq(batch.size());
  const double log_jac = theta_log_jacobian(net);
  for (Index n = 0; n < batch.size(); ++n)
    lq[n] = head_log_density(out.col(n).data(), theta.col(n).data(), hi, work, nullptr, 0.0) -
            log_jac;
  return lq;
}

// -- add_component --------------------------------------------------------------------

ComponentAddition add_component(const Mdn& net, const Observation& obs, std::uint64_t seed,
                                double noise) {
  const Index K = net.arch.components, d = net.arch.theta_dim;
  const GaussianMixture current = extract_posterior(net, obs);
  Index best = 0;
  current.weights.maxCoeff(&best);

  // last hidden activation and logits at the observation
  const Vec& p = net.params.values();
  Mat a = net.arch.gru ? gru_forward(*net.arch.gru, p.data() + net.gru_offset,
                                     single_steps(obs.sequence))
                       : network_input(net, p, obs.x,
                                       obs.mask.size() ? Mat(obs.mask) : Mat());
  const Index L = static_cast<Index>(net.layers.size());
  for (Index l = 0; l + 1 < L; ++l) {
    const auto& ly = net.layers[l];
    Mat z = Eigen::Map<const Mat>(p.data() + net.mean_offset + ly.w, ly.out, ly.in) * a;
    z.colwise() += Eigen::Map<const Vec>(p.data() + net.mean_offset + ly.b, ly.out);
    a = activate(z, net.arch.activation);
  }
  const Vec hidden = a.col(0);
  const auto& last = net.layers.back();
  const Vec out_now =
      Eigen::Map<const Mat>(p.data() + net.mean_offset + last.w, last.out, last.in) * hidden +
      Eigen::Map<const Vec>(p.data() + net.mean_offset + last.b, last.out);
  const Vec logits_now = out_now.head(K);

  MdnArchitecture grown_arch = net.arch;
  grown_arch.components = K + 1;
  ComponentAddition res{make_mdn(grown_arch, net.x_norm, net.theta_norm, 0), {}};
  Mdn& g = res.net;
  Vec& q = g.params.values();
  if (net.c_size)
    q.segment(g.c_offset, g.c_size) = p.segment(net.c_offset, net.c_size);
  if (net.gru_size)
    q.segment(g.gru_offset, g.gru_size) = p.segment(net.gru_offset, net.gru_size);

  // map every dense entry of the grown network to its source
  res.source.assign(static_cast<std::size_t>(g.dense_size), -1);
  const HeadIndex old_h{K, d}, new_h{K + 1, d};
  const Index T = tri_size(d);
  auto out_row_source = [&](Index r) -> Index {
    if (r < K + 1)
      return r < K ? old_h.logit(r) : old_h.logit(best);
    if (r < new_h.chol(0)) {
      const Index k = (r - new_h.mean(0)) / d, i = (r - new_h.mean(0)) % d;
      return old_h.mean(k < K ? k : best) + i;
    }
    const Index k = (r - new_h.chol(0)) / T, i = (r - new_h.chol(0)) % T;
    return old_h.chol(k < K ? k : best) + i;
  };
  for (Index l = 0; l < L; ++l) {
    const auto& lo = net.layers[l];
    const auto& ln = g.layers[l];
    for (Index r = 0; r < ln.out; ++r) {
      const Index src_r = l + 1 < L ? r : out_row_source(r);
      for (Index c = 0; c < ln.in; ++c)
        res.source[ln.w + c * ln.out + r] = lo.w + c * lo.out + src_r;
      res.source[ln.b + r] = lo.b + src_r;
    }
  }
  for (Index i = 0; i < g.dense_size; ++i) {
    const Index s = res.source[i];
    q[g.mean_offset + i] = p[net.mean_offset + s];
    if (net.arch.bayesian)
      q[g.logstd_offset + i] = p[net.logstd_offset + s];
  }

  // the copied rows are new parameters
  const auto& out_new = g.layers.back();
  Rng rng(seed);
  auto mark_new = [&](Index r) {
    for (Index c = 0; c < out_new.in; ++c) {
      res.source[out_new.w + c * out_new.out + r] = -1;
      if (net.arch.bayesian)
        q[g.logstd_offset + out_new.w + c * out_new.out + r] = kInitLogStd;
    }
    res.source[out_new.b + r] = -1;
    if (net.arch.bayesian)
      q[g.logstd_offset + out_new.b + r] = kInitLogStd;
  };
  mark_new(new_h.logit(K));
  for (Index i = 0; i < d; ++i) {
    mark_new(new_h.mean(K) + i);
    q[g.mean_offset + out_new.b + new_h.mean(K) + i] += noise * standard_normal(rng);
  }
  for (Index i = 0; i < T; ++i)
    mark_new(new_h.chol(K) + i);

  // logit bias so the new weight at obs is 1/(K+1)
  Eigen::Map<const Mat> w_out(q.data() + g.mean_offset + out_new.w, out_new.out, out_new.in);
  const double target = log_sum_exp(logits_now) - std::log(static_cast<double>(K));
  q[g.mean_offset + out_new.b + new_h.logit(K)] = target - w_out.row(new_h.logit(K)).dot(hidden);
  g.params.validate();
  return res;
}

DiagGaussian expand_weight_prior(const ComponentAddition& grown, const DiagGaussian& prior,
                                 double new_std) {
  const Mdn& g = grown.net;
  DiagGaussian out{Vec(g.dense_size), Vec(g.dense_size)};
  const Vec& q = g.params.values();
  for (Index i = 0; i < g.dense_size; ++i) {
    const Index s = grown.source[i];
    if (s >= 0) {
      out.mean[i] = prior.mean[s];
      out.std[i] = prior.std[s];
    } else {
      out.mean[i] = q[g.mean_offset + i];
      out.std[i] = new_std;
    }
  }
  return out;
}

// -- checkpoints ------------------------------------------------------------------------

namespace {

constexpr const char* kMdnFormat = "snpekit.mdn";

std::uint64_t to_little(std::uint64_t u) {
  if constexpr (std::endian::native == std::endian::big)
    u = __builtin_bswap64(u);
  return u;
}

nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

} // namespace

void write_checkpoint(const std::filesystem::path& path, nlohmann::json header,
                      const std::vector<std::pair<std::string, const Vec*>>& arrays) {
  header["arrays"] = nlohmann::json::array();
  for (const auto& [name, v] : arrays)
    header["arrays"].push_back({{"name", name}, {"length", v->size()}});
  header["byte_order"] = "little";
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw FormatError("cannot write " + path.string());
  out << header.dump() << '\n';
  for (const auto& [name, v] : arrays)
    for (Index i = 0; i < v->size(); ++i) {
      const std::uint64_t u = to_little(std::bit_cast<std::uint64_t>((*v)[i]));
      out.write(reinterpret_cast<const char*>(&u), sizeof u);
    }
  if (!out)
    throw FormatError("write failed for " + path.string());
}

std::pair<nlohmann::json, std::vector<Vec>> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  std::vector<Vec> arrays;
  for (const auto& a : header.at("arrays")) {
    Vec v(a.at("length").get<Index>());
    for (Index i = 0; i < v.size(); ++i) {
      std::uint64_t u = 0;
      if (!in.read(reinterpret_cast<char*>(&u), sizeof u))
        throw FormatError(path.string() + ": truncated array " + a.at("name").get<std::string>());
      v[i] = std::bit_cast<double>(to_little(u));
    }
    arrays.push_back(std::move(v));
  }
  return {header, arrays};
}

nlohmann::json to_json(const MdnArchitecture& a) {
  nlohmann::json j{{"n_features", a.n_features},
                   {"hidden", a.hidden},
                   {"activation", to_string(a.activation)},
                   {"components", a.components},
                   {"theta_dim", a.theta_dim},
                   {"bayesian", a.bayesian},
                   {"impute", a.impute}};
  if (a.gru)
    j["gru"] = {{"inputs", a.gru->inputs}, {"units", a.gru->units}};
  return j;
}

MdnArchitecture architecture_from_json(const nlohmann::json& j) {
  MdnArchitecture a;
  a.n_features = j.at("n_features").get<Index>();
  a.hidden = j.at("hidden").get<std::vector<Index>>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.components = j.at("components").get<Index>();
  a.theta_dim = j.at("theta_dim").get<Index>();
  a.bayesian = j.at("bayesian").get<bool>();
  a.impute = j.at("impute").get<bool>();
  if (j.contains("gru"))
    a.gru = GruShape{j["gru"].at("inputs").get<Index>(), j["gru"].at("units").get<Index>()};
  return a;
}

void save_mdn(const Mdn& net, const std::filesystem::path& path) {
  nlohmann::json h{{"format", kMdnFormat},
                   {"version", 1},
                   {"architecture", to_json(net.arch)},
                   {"x_norm", {{"shift", vec_json(net.x_norm.shift)}, {"scale", vec_json(net.x_norm.scale)}}},
                   {"theta_norm",
                    {{"shift", vec_json(net.theta_norm.shift)}, {"scale", vec_json(net.theta_norm.scale)}}}};
  const Vec& p = net.params.values();
  const Vec phi_m = p.segment(net.mean_offset, net.dense_size);
  const Vec phi_s = net.arch.bayesian ? Vec(net.dense_logstds(p).array().exp()) : Vec();
  const Vec c = p.segment(net.c_offset, net.c_size);
  const Vec gru = p.segment(net.gru_offset, net.gru_size);
  write_checkpoint(path, h, {{"phi_m", &phi_m}, {"phi_s", &phi_s}, {"c", &c}, {"gru", &gru}});
}

Mdn load_mdn(const std::filesystem::path& path) {
  auto [h, arrays] = read_checkpoint(path);
  if (h.value("format", "") != kMdnFormat)
    throw FormatError(path.string() + ": not an MDN checkpoint");
  if (h.value("version", 0) != 1)
    throw FormatError(path.string() + ": unsupported MDN checkpoint version");
  Standardizer xn{vec_from(h.at("x_norm").at("shift")), vec_from(h.at("x_norm").at("scale"))};
  Standardizer tn{vec_from(h.at("theta_norm").at("shift")), vec_from(h.at("theta_norm").at("scale"))};
  Mdn net = make_mdn(architecture_from_json(h.at("architecture")), xn, tn, 0);
  if (arrays.size() != 4)
    throw FormatError(path.string() + ": expected 4 arrays");
  Vec& p = net.params.values();
  require_dim(arrays[0].size(), net.dense_size, "phi_m");
  p.segment(net.mean_offset, net.dense_size) = arrays[0];
  if (net.arch.bayesian) {
    require_dim(arrays[1].size(), net.dense_size, "phi_s");
    p.segment(net.logstd_offset, net.dense_size) = arrays[1].array().log().matrix();
  }
  require_dim(arrays[2].size(), net.c_size, "c");
  p.segment(net.c_offset, net.c_size) = arrays[2];
  require_dim(arrays[3].size(), net.gru_size, "gru");
  p.segment(net.gru_offset, net.gru_size) = arrays[3];
  net.params.validate();
  return net;
}

} // namespace snpe
