#include "snpe/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum Exit { Ok = 0, InputError = 2, RunFailure = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "experiment YAML file");
  if (needs_config)
    opt->required();
  cmd->add_option("--seed", c.seed, "override the master seed");
  cmd->add_option("--workers", c.workers, "parallel simulation workers")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output directory or file");
}

snpe::ExperimentConfig load(const Common& c) {
  snpe::ExperimentConfig cfg = snpe::load_experiment(c.config);
  if (c.seed)
    cfg.seed = *c.seed;
  if (c.workers)
    cfg.workers = *c.workers;
  return cfg;
}

std::filesystem::path output_dir(const Common& c, const snpe::ExperimentConfig& cfg, const char* fallback) {
  if (!c.out.empty())
    return c.out;
  if (!cfg.output.empty())
    return cfg.output;
  return std::filesystem::path("runs") / (cfg.name + "-" + fallback);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential neural posterior estimation toolkit"};
  app.set_version_flag("--version", snpe::kVersion);
  app.require_subcommand(1);

  Common sim_opts, infer_opts, cmp_opts, eval_opts;
  std::vector<double> theta;
  snpe::Index prior_draws = 0;
  bool no_traces = false;
  auto* sim = app.add_subcommand("simulate", "simulate at given parameters or prior draws");
  add_common(sim, sim_opts, true);
  sim->add_option("--theta", theta, "parameter vector")->delimiter(',');
  sim->add_option("--prior-draws", prior_draws, "number of prior draws")->check(CLI::NonNegativeNumber);
  sim->add_flag("--no-traces", no_traces, "write the feature table only");

  auto* infer = app.add_subcommand("infer", "run the configured inference method");
  add_common(infer, infer_opts, true);

  std::vector<std::string> runs;
  snpe::Index compare_grid = 50;
  auto* cmp = app.add_subcommand("compare", "compare posteriors of two or more runs");
  add_common(cmp, cmp_opts, false);
  cmp->add_option("runs", runs, "run directories or posterior files")->required()->expected(2, -1);
  cmp->add_option("--grid", compare_grid, "grid points per axis for 2-D marginals")->check(CLI::Range(2, 10000));

  std::string posterior, points;
  std::vector<double> lower, upper;
  snpe::Index eval_grid = 101;
  auto* eval = app.add_subcommand("eval", "evaluate a posterior on a grid or at points");
  add_common(eval, eval_opts, false);
  eval->add_option("posterior", posterior, "posterior JSON")->required();
  eval->add_option("--points", points, "CSV of parameter values with a header row");
  eval->add_option("--lower", lower, "grid lower bounds")->delimiter(',');
  eval->add_option("--upper", upper, "grid upper bounds")->delimiter(',');
  eval->add_option("--grid", eval_grid, "grid points per axis")->check(CLI::Range(2, 100000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Ok : InputError;
  }

  try {
    if (sim->parsed()) {
      const auto cfg = load(sim_opts);
      snpe::SimulateRequest req;
      if (!theta.empty())
        req.theta = Eigen::Map<const snpe::Vec>(theta.data(), static_cast<snpe::Index>(theta.size()));
      req.prior_draws = prior_draws;
      req.traces = !no_traces;
      const auto out = output_dir(sim_opts, cfg, "simulate");
      snpe::cmd_simulate(cfg, req, out);
      std::cout << "wrote " << (out / "features.csv").string() << '\n';
    } else if (infer->parsed()) {
      const auto cfg = load(infer_opts);
      const auto out = output_dir(infer_opts, cfg, "infer");
      snpe::cmd_infer(cfg, out);
      std::cout << "wrote " << (out / "manifest.json").string() << '\n';
    } else if (cmp->parsed()) {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      const std::filesystem::path out = cmp_opts.out.empty() ? "comparison" : cmp_opts.out;
      snpe::cmd_compare(dirs, out, compare_grid);
      std::cout << "wrote " << (out / "summary.csv").string() << '\n';
    } else if (eval->parsed()) {
      snpe::EvalRequest req;
      req.posterior = posterior;
      req.points = points;
      req.lower = lower;
      req.upper = upper;
      req.grid_points = eval_grid;
      const std::filesystem::path out = eval_opts.out.empty() ? "density.csv" : eval_opts.out;
      snpe::cmd_eval(req, out);
      std::cout << "wrote " << out.string() << '\n';
    }
  } catch (const snpe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return InputError;
  } catch (const snpe::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return InputError;
  } catch (const snpe::IncompatibleRuns& e) {
    std::cerr << "incompatible runs: " << e.what() << '\n';
    return InputError;
  } catch (const snpe::DimensionMismatch& e) {
    std::cerr << "dimension mismatch: " << e.what() << '\n';
    return InputError;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return RunFailure;
  }
  return Ok;
}
