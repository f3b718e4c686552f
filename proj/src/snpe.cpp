#include "snpe/snpe.hpp"

#include "snpe/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <locale>
#include <numeric>

namespace snpe {

namespace {

constexpr long kMaxSupportRejections = 100000;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Item {
  const RoundData* data;
  Index col;
};

MdnBatch make_batch(const std::vector<Item>& items, std::size_t begin, std::size_t end) {
  const RoundData& first = *items[begin].data;
  const Index B = static_cast<Index>(end - begin);
  MdnBatch b;
  b.theta.resize(first.theta.rows(), B);
  b.weight.resize(B);
  const bool seq = !first.sequences.empty();
  if (seq) {
    const Mat& s0 = first.sequences[static_cast<std::size_t>(items[begin].col)];
    b.steps.assign(static_cast<std::size_t>(s0.cols()), Mat(s0.rows(), B));
  } else {
    b.x.resize(first.x.rows(), B);
    b.mask.resize(first.mask.rows(), B);
  }
  for (Index k = 0; k < B; ++k) {
    const auto& [d, c] = items[begin + static_cast<std::size_t>(k)];
    b.theta.col(k) = d->theta.col(c);
    b.weight[k] = d->weight[c];
    if (seq) {
      const Mat& s = d->sequences[static_cast<std::size_t>(c)];
      require_dim(static_cast<Index>(b.steps.size()), s.cols(), "sequence length");
      for (std::size_t t = 0; t < b.steps.size(); ++t)
        b.steps[t].col(k) = s.col(static_cast<Index>(t));
    } else {
      b.x.col(k) = d->x.col(c);
      b.mask.col(k) = d->mask.col(c);
    }
  }
  return b;
}

// Draws from the proposal, truncated to the prior support when asked.
Vec draw_in_support(const Distribution& proposal, const Distribution& prior, bool truncate,
                    Rng& rng, long& rejected) {
  long run = 0;
  for (;;) {
    Vec t = sample(proposal, 1, rng).col(0);
    if (!truncate || in_support(prior, t))
      return t;
    ++rejected;
    if (++run > kMaxSupportRejections)
      throw ProposalStarvation("proposal has almost no mass inside the prior support");
  }
}

Index target_components(const SnpeConfig& c, int round) {
  Index k = c.arch.components;
  for (const auto& [r, n] : c.components)
    if (r <= round)
      k = std::max(k, n);
  return k;
}

struct Proposed {
  RoundData data;
  std::vector<FeatureVector> features;
  long guard_rejections = 0;
  long support_rejections = 0;
  double seconds = 0.0;
};

// Propose, simulate and weight; shared by both methods.
Proposed propose_and_simulate(SnpeRun& run, bool weighted) {
  const auto t0 = std::chrono::steady_clock::now();
  const Task& task = *run.task;
  const SnpeConfig& cfg = run.config;
  const int r = run.state.round;
  const Index N = cfg.sims_per_round, d = task.theta_dim();
  Proposed out;
  RoundData& data = out.data;
  data.theta.resize(d, N);
  data.iw = Vec::Ones(N);

  Rng rng(derive_seed(run.state.seed, {static_cast<std::uint64_t>(r), 1}));
  const ThetaSampler sampler = [&](Rng& g) {
    return draw_in_support(run.state.proposal, task.prior, cfg.truncate_to_prior, g,
                           out.support_rejections);
  };
  for (Index i = 0; i < N; ++i) {
    GuardedDraw draw = run.guard ? guarded_propose(sampler, *run.guard, rng) : GuardedDraw{sampler(rng), 0};
    out.guard_rejections += draw.rejections;
    data.theta.col(i) = draw.theta;
    if (weighted) {
      double w = importance_weight(task.prior, run.state.proposal, draw.theta);
      if (cfg.effective_prior_weights && run.guard && run.guard->active())
        w *= 1.0 - run.guard->predict(draw.theta);
      data.iw[i] = w;
    }
  }

  std::vector<Simulation> sims(static_cast<std::size_t>(N));
  parallel_for(static_cast<std::size_t>(N), cfg.workers, [&](std::size_t i) {
    sims[i] = task.simulate(data.theta.col(static_cast<Index>(i)),
                            derive_seed(run.state.seed, {static_cast<std::uint64_t>(r), 2, i}));
  });

  const Index F = sims.front().features.size();
  data.x.resize(F, N);
  data.mask.resize(F, N);
  data.bad.resize(N);
  for (Index i = 0; i < N; ++i) {
    auto& s = sims[static_cast<std::size_t>(i)];
    require_dim(s.features.size(), F, "simulated features");
    data.x.col(i) = s.features.values;
    data.mask.col(i) = s.features.mask;
    data.bad[i] = s.features.bad ? 1.0 : 0.0;
    if (s.sequence.size() != 0)
      data.sequences.push_back(std::move(s.sequence));
    out.features.push_back(std::move(s.features));
  }
  if (!data.sequences.empty() && static_cast<Index>(data.sequences.size()) != N)
    throw DimensionMismatch("every simulation must return a sequence for a recurrent front end");
  out.seconds = seconds_since(t0);
  return out;
}

// Creates the network on the first round, once feature statistics exist.
void ensure_network(SnpeRun& run, const RoundData& data) {
  if (run.net)
    return;
  const Task& task = *run.task;
  Standardizer xn;
  if (!run.config.arch.gru) {
    std::vector<Index> good;
    for (Index i = 0; i < data.size(); ++i)
      if (data.bad[i] == 0.0)
        good.push_back(i);
    if (good.empty())
      throw AllZeroWeights("every first-round simulation was bad");
    xn = Standardizer::fit(data.x(Eigen::all, good), data.mask(Eigen::all, good));
  }
  run.net = make_mdn(run.config.arch, xn, prior_standardizer(task.prior),
                     derive_seed(run.state.seed, {0, 3}));
}

void finish_weights(SnpeRun& run, Proposed& p) {
  RoundData& data = p.data;
  data.kernel.resize(data.size());
  for (Index i = 0; i < data.size(); ++i)
    data.kernel[i] = kernel_value(run.config.kernel, p.features[static_cast<std::size_t>(i)],
                                  run.task->observed, run.net->x_norm);
  data.weight = normalise_weights(data.iw.cwiseProduct(data.kernel));
}

RoundDiagnostics base_diagnostics(const SnpeRun& run, const Proposed& p) {
  RoundDiagnostics d;
  d.round = run.state.round;
  d.simulations = p.data.size();
  d.bad = static_cast<Index>(p.data.bad.sum());
  d.guard_rejections = p.guard_rejections;
  d.support_rejections = p.support_rejections;
  d.ess = effective_sample_size(p.data.weight);
  double lo = INFINITY, hi = 0.0;
  for (Index i = 0; i < p.data.size(); ++i)
    if (p.data.weight[i] > 0.0) {
      lo = std::min(lo, p.data.weight[i]);
      hi = std::max(hi, p.data.weight[i]);
    }
  d.weight_min = lo;
  d.weight_max = hi;
  d.seconds_simulate = p.seconds;
  d.guard_loss = std::nan("");
  return d;
}

void update_guard(SnpeRun& run, const RoundData& data, RoundDiagnostics& diag) {
  if (!run.guard)
    return;
  diag.guard_loss = guard_update(*run.guard, data.theta, data.bad,
                                 derive_seed(run.state.seed, {static_cast<std::uint64_t>(run.state.round), 4}));
}

std::vector<const RoundData*> training_set(const SnpeRun& run, const RoundData& current) {
  std::vector<const RoundData*> out;
  if (run.config.retain_all_rounds)
    for (const auto& h : run.history)
      out.push_back(&h);
  out.push_back(&current);
  return out;
}

void json_number(nlohmann::json& j, const char* key, double v) {
  j[key] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

} // namespace

// -- kernels and weights ---------------------------------------------------------

double kernel_value(const CalibrationKernel& k, const FeatureVector& x, const Observation& xo,
                    const Standardizer& norm) {
  if (x.bad)
    return 0.0;
  if (k.kind == KernelKind::BinaryBad)
    return 1.0;
  if (!(k.bandwidth > 0.0))
    throw ConfigError("gaussian kernel bandwidth must be positive");
  require_dim(x.size(), xo.x.size(), "kernel features");
  const Vec a = norm.apply(x.values), b = norm.apply(xo.x);
  double sq = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool missing = x.mask[i] != 0.0 || (xo.mask.size() != 0 && xo.mask[i] != 0.0);
    if (!missing)
      sq += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return std::exp(-sq / (2.0 * k.bandwidth * k.bandwidth));
}

double importance_weight(const Distribution& prior, const Distribution& proposal, const Vec& theta) {
  const double lp = log_pdf(prior, theta);
  if (!std::isfinite(lp))
    return 0.0;
  const double lq = log_pdf(proposal, theta);
  if (!std::isfinite(lq))
    throw DegenerateProposal("proposal density is zero where the prior is positive");
  return std::exp(lp - lq);
}

Vec normalise_weights(const Vec& w) {
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total))
    throw AllZeroWeights("every weight in the round is zero");
  return w * (static_cast<double>(w.size()) / total);
}

double effective_sample_size(const Vec& w) {
  const double s2 = w.squaredNorm();
  return s2 > 0.0 ? w.sum() * w.sum() / s2 : 0.0;
}

double svi_loss(const Mdn& net, const MdnBatch& batch, const Vec& iw, const Vec& kernel,
                const DiagGaussian& pi_prev, Index n, std::uint64_t seed) {
  if (n < 1)
    throw Error("svi_loss: N must be positive");
  const double kl = kl_diag_gaussians(net.weight_posterior(), pi_prev) / static_cast<double>(n);
  if (batch.size() == 0)
    return kl;
  require_dim(iw.size(), batch.size(), "importance weights");
  require_dim(kernel.size(), batch.size(), "kernel values");
  MdnBatch b = batch;
  b.weight = iw.cwiseProduct(kernel);
  ObjectiveOptions opt;
  opt.data_scale = static_cast<double>(b.size()) / static_cast<double>(n);
  opt.weight_prior = pi_prev;
  opt.prior_scale = 1.0 / static_cast<double>(n);
  const double loss = mdn_objective(net, net.params.values(), b, opt, seed, false).loss;
  if (!std::isfinite(loss))
    throw NonFiniteLoss("svi loss is not finite");
  return loss;
}

DiagGaussian isotropic_weight_prior(const Mdn& net, double precision) {
  if (!(precision > 0.0))
    throw ConfigError("weight prior precision must be positive");
  return {Vec::Zero(net.dense_size), Vec::Constant(net.dense_size, 1.0 / std::sqrt(precision))};
}

Standardizer prior_standardizer(const Distribution& prior) {
  return {mean(prior), covariance(prior).diagonal().cwiseSqrt()};
}

// -- configuration -----------------------------------------------------------------

void SnpeConfig::validate() const {
  if (rounds < 1)
    throw ConfigError("rounds must be at least 1");
  if (sims_per_round < 1)
    throw ConfigError("sims_per_round must be at least 1");
  if (!(weight_precision > 0.0))
    throw ConfigError("weight_precision must be positive");
  if (!(clip > 0.0))
    throw ConfigError("clip must be positive");
  if (epochs < 0 || batch < 1)
    throw ConfigError("epochs must be >= 0 and batch >= 1");
  if (continuity_start < 1)
    throw ConfigError("continuity_start must be at least 1");
  for (const auto& [r, k] : components)
    if (r < 1 || k < 1)
      throw ConfigError("component schedule needs rounds >= 1 and components >= 1");
  if (method == Method::Cdelfi && (arch.components != 1 || !components.empty()))
    throw ConfigError("cdelfi uses a single Gaussian component");
  if (kernel.kind == KernelKind::Gaussian && !(kernel.bandwidth > 0.0))
    throw ConfigError("gaussian kernel bandwidth must be positive");
  if (kernel.kind == KernelKind::Gaussian && arch.gru)
    throw ConfigError("gaussian kernel needs hand-designed features");
}

nlohmann::json to_json(const RoundDiagnostics& d) {
  nlohmann::json j{{"round", d.round},
                   {"simulations", d.simulations},
                   {"bad", d.bad},
                   {"bad_fraction", d.simulations ? double(d.bad) / double(d.simulations) : 0.0},
                   {"guard_rejections", d.guard_rejections},
                   {"support_rejections", d.support_rejections},
                   {"components", d.components},
                   {"loss_curve", d.loss_curve}};
  json_number(j, "ess", d.ess);
  json_number(j, "weight_min", d.weight_min);
  json_number(j, "weight_max", d.weight_max);
  json_number(j, "kl_term", d.kl_term);
  json_number(j, "guard_loss", d.guard_loss);
  json_number(j, "seconds_simulate", d.seconds_simulate);
  json_number(j, "seconds_train", d.seconds_train);
  return j;
}

// -- training ----------------------------------------------------------------------------

TrainReport train_mdn(Mdn& net, const std::vector<const RoundData*>& data,
                      const std::optional<DiagGaussian>& weight_prior, const SnpeConfig& config,
                      std::uint64_t seed) {
  std::vector<Item> items;
  Index total = 0;
  for (const RoundData* d : data) {
    total += d->size();
    for (Index i = 0; i < d->size(); ++i)
      if (d->weight[i] > 0.0)
        items.push_back({d, i});
  }
  if (items.empty())
    throw AllZeroWeights("no simulation carries weight");

  ObjectiveOptions opt;
  opt.data_scale = static_cast<double>(items.size()) / static_cast<double>(total);
  opt.reparameterise = net.arch.bayesian;
  if (net.arch.bayesian && weight_prior) {
    opt.weight_prior = weight_prior;
    opt.prior_scale = 1.0 / static_cast<double>(total);
    opt.point_precision = config.weight_precision;
  }
  const MdnModel model{&net, opt};

  TrainReport report;
  Vec& p = net.params.values();
  AdamState adam(p.size(), config.adam);
  const std::size_t n = items.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(config.batch), n);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle(derive_seed(seed, {static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = n - 1; i > 0; --i)
      std::swap(items[i], items[static_cast<std::size_t>(shuffle() % (i + 1))]);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const MdnBatch batch = make_batch(items, start, std::min(n, start + bs));
      const auto r = value_and_grad(model, net.params, batch,
                                    derive_seed(seed, {static_cast<std::uint64_t>(epoch), start + 1}));
      adam_step(adam, p, clip_global_norm(r.grad, config.clip));
      sum += r.loss;
      ++batches;
    }
    report.loss_curve.push_back(sum / batches);
  }
  net.params.validate();
  if (opt.weight_prior)
    report.kl_term = kl_diag_gaussians(net.weight_posterior(), *opt.weight_prior) / static_cast<double>(total);
  return report;
}

// -- rounds ------------------------------------------------------------------------------

SnpeRun start_run(const Task& task, const SnpeConfig& config) {
  config.validate();
  if (!task.simulate)
    throw ConfigError("task has no simulator");
  SnpeRun run;
  run.task = &task;
  run.config = config;
  run.config.arch.theta_dim = task.theta_dim();
  run.config.arch.n_features = std::max<Index>(1, task.n_features());
  if (config.method == Method::Cdelfi)
    run.config.arch.bayesian = false;
  run.config.arch.validate();
  run.state.round = 1;
  run.state.proposal = task.prior;
  run.state.seed = config.seed;
  if (config.use_guard)
    run.guard = make_guard(config.guard, prior_standardizer(task.prior), derive_seed(config.seed, {0, 6}));
  return run;
}

RoundRecord run_round(SnpeRun& run) {
  if (run.config.method == Method::Cdelfi)
    return cdelfi_round(run);
  const Task& task = *run.task;
  const SnpeConfig& cfg = run.config;
  const int r = run.state.round;
  const auto ur = static_cast<std::uint64_t>(r);

  Proposed p = propose_and_simulate(run, true);
  ensure_network(run, p.data);
  finish_weights(run, p);
  RoundDiagnostics diag = base_diagnostics(run, p);
  update_guard(run, p.data, diag);

  const auto t0 = std::chrono::steady_clock::now();
  Mdn& net = *run.net;
  const Index want = target_components(cfg, r);
  while (net.arch.components < want) {
    ComponentAddition grown = add_component(
        net, task.observed, derive_seed(run.state.seed, {ur, 5, static_cast<std::uint64_t>(net.arch.components)}),
        cfg.component_noise);
    if (run.state.weight_prior)
      run.state.weight_prior =
          expand_weight_prior(grown, *run.state.weight_prior, 1.0 / std::sqrt(cfg.weight_precision));
    net = std::move(grown.net);
  }

  std::optional<DiagGaussian> prior;
  if (net.arch.bayesian)
    prior = (r >= cfg.continuity_start && run.state.weight_prior)
                ? *run.state.weight_prior
                : isotropic_weight_prior(net, cfg.weight_precision);
  const TrainReport tr =
      train_mdn(net, training_set(run, p.data), prior, cfg, derive_seed(run.state.seed, {ur, 7}));
  diag.loss_curve = tr.loss_curve;
  diag.kl_term = tr.kl_term;
  diag.components = net.arch.components;

  GaussianMixture post = extract_posterior(net, task.observed);
  post.names = task.theta_names;
  diag.seconds_train = seconds_since(t0);

  if (net.arch.bayesian)
    run.state.weight_prior = net.weight_posterior();
  run.state.proposal = post;
  run.state.diagnostics.push_back(diag);
  run.posteriors.push_back(post);
  ++run.state.round;
  if (cfg.retain_all_rounds)
    run.history.push_back(p.data);
  return {post, diag, std::move(p.data)};
}

Gaussian cdelfi_correction(const GaussianMixture& conditional, const Distribution& proposal,
                           const Distribution& prior) {
  if (conditional.components() != 1)
    throw Error("cdelfi correction needs a single Gaussian");
  std::optional<Gaussian> den;
  if (const auto* g = std::get_if<GaussianMixture>(&proposal)) {
    if (g->components() != 1)
      throw Error("cdelfi proposal must be a single Gaussian");
    den = g->component(0);
  }
  return divide_gaussian(conditional.component(0), den, prior);
}

RoundRecord cdelfi_round(SnpeRun& run) {
  const Task& task = *run.task;
  const int r = run.state.round;
  Proposed p = propose_and_simulate(run, false);
  ensure_network(run, p.data);
  finish_weights(run, p);
  RoundDiagnostics diag = base_diagnostics(run, p);
  update_guard(run, p.data, diag);

  const auto t0 = std::chrono::steady_clock::now();
  const TrainReport tr = train_mdn(*run.net, training_set(run, p.data), std::nullopt, run.config,
                                   derive_seed(run.state.seed, {static_cast<std::uint64_t>(r), 7}));
  diag.loss_curve = tr.loss_curve;
  diag.components = 1;
  const GaussianMixture conditional = extract_posterior(*run.net, task.observed);
  GaussianMixture post(cdelfi_correction(conditional, run.state.proposal, task.prior));
  post.names = task.theta_names;
  diag.seconds_train = seconds_since(t0);

  run.state.proposal = post;
  run.state.diagnostics.push_back(diag);
  run.posteriors.push_back(post);
  ++run.state.round;
  if (run.config.retain_all_rounds)
    run.history.push_back(p.data);
  return {post, diag, std::move(p.data)};
}

void run_snpe(SnpeRun& run, const std::function<void(const SnpeRun&, const RoundRecord&)>& after_round) {
  while (run.state.round <= run.config.rounds) {
    const RoundRecord rec = run_round(run);
    if (after_round)
      after_round(run, rec);
  }
}

// -- artifacts ---------------------------------------------------------------------------

void write_round_artifacts(const SnpeRun& run, const RoundRecord& record,
                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "posterior.json");
    out << to_json(record.posterior).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "diagnostics.json");
    out << to_json(record.diagnostics).dump(2) << '\n';
  }
  const Task& task = *run.task;
  const RoundData& d = record.data;
  std::ofstream out(dir / "simulations.csv");
  out.imbue(std::locale::classic());
  out.precision(17);
  const bool features = d.sequences.empty();
  out << "id";
  for (const auto& n : task.theta_names)
    out << ',' << n;
  if (features) {
    for (const auto& n : task.feature_names)
      out << ',' << n;
    for (const auto& n : task.feature_names)
      out << ",mask_" << n;
  }
  out << ",bad,iw\n";
  for (Index i = 0; i < d.size(); ++i) {
    out << i;
    for (Index k = 0; k < d.theta.rows(); ++k)
      out << ',' << d.theta(k, i);
    if (features) {
      for (Index k = 0; k < d.x.rows(); ++k)
        out << ',' << d.x(k, i);
      for (Index k = 0; k < d.mask.rows(); ++k)
        out << ',' << d.mask(k, i);
    }
    out << ',' << d.bad[i] << ',' << d.iw[i] << '\n';
  }
}

} // namespace snpe
