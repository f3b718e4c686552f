#pragma once

#include "snpe/baselines.hpp"
#include "snpe/features.hpp"
#include "snpe/simulators.hpp"
#include "snpe/snpe.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace snpe {

inline constexpr const char* kVersion = "0.1.0";

enum class SimulatorKind { Gm, Glm, Autapse, Hh };
enum class RunMethod { Snpe, Cdelfi, Rejection, Smc, Mcmc };
enum class FeatureKind { Hand, Gru };

struct GlmSettings {
  Index bins = 100;
  Index filter_length = 10;
  std::uint64_t input_seed = 1;
};

struct PriorSettings {
  enum class Kind { Box, Gaussian, Smoothness, RelativeBox } kind = Kind::Box;
  Vec lower, upper;           // box
  Vec mean, sd;               // gaussian (diagonal)
  double sigma = 0.2;         // smoothness
  Augmentation augmentation = Augmentation::Dirichlet;
  double low = 0.5, high = 1.5; // relative box around the true parameters
};

struct ObservationSettings {
  std::optional<Vec> theta;   // defaults to the simulator's reference parameters
  std::uint64_t seed = 1000;
  std::optional<Vec> x;       // given features, bypassing simulation
  std::filesystem::path trace; // imported Trace CSV
};

struct FeatureSettings {
  FeatureKind kind = FeatureKind::Hand;
  bool latency = false;
  Index gru_units = 25;
  Index stride = 40;
};

struct RejectionSettings {
  double eps = 0.5;
  Index simulations = 10000;
};

//! Parsed and validated experiment file.
struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int workers = 1;
  std::filesystem::path output;

  SimulatorKind simulator = SimulatorKind::Gm;
  GmSpec gm;
  GlmSettings glm;
  AutapseSpec autapse;
  HhSpec hh;
  PriorSettings prior;
  ObservationSettings observation;
  FeatureSettings features;

  RunMethod method = RunMethod::Snpe;
  SnpeConfig snpe;
  SmcConfig smc;
  McmcConfig mcmc;
  RejectionSettings rejection;

  std::string source;   // config text as read
  std::filesystem::path base_dir; // relative paths resolve against this
};

//! Parses YAML text. Unknown keys and invalid values raise ConfigError
//! with a "line L, column C" prefix.
ExperimentConfig parse_experiment(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);

//! Reference parameters of the simulator: the observation default.
Vec reference_theta(const ExperimentConfig& cfg);
Distribution make_prior(const ExperimentConfig& cfg);
//! Simulator, features, prior and observation bound together. The
//! observation is simulated at the reference parameters unless given.
Task make_task(const ExperimentConfig& cfg);

//! The SnpeConfig with workers, seed and feature-dependent architecture filled in.
SnpeConfig snpe_settings(const ExperimentConfig& cfg, const Task& task);

//! Trace for one simulator call, when the simulator produces one.
std::optional<Trace> simulate_trace(const ExperimentConfig& cfg, const Vec& theta, std::uint64_t seed);

std::uint64_t config_hash(const ExperimentConfig& cfg);

// -- commands ---------------------------------------------------------------------------

struct SimulateRequest {
  std::optional<Vec> theta;
  Index prior_draws = 0;
  bool traces = true;
};

//! Writes features.csv (and trace_<id>.csv for trace simulators) to `out`.
void cmd_simulate(const ExperimentConfig& cfg, const SimulateRequest& req, const std::filesystem::path& out);

//! Runs the configured method and writes per-round artifacts, the final
//! posterior.json and manifest.json. On failure a partial manifest with
//! status "failed" is written and the error rethrown.
void cmd_infer(const ExperimentConfig& cfg, const std::filesystem::path& out);

//! Reads the final posterior of each run directory and writes
//! summary.csv, covariance.csv, differences.csv and one marginal grid per
//! parameter pair. Throws IncompatibleRuns for mismatched parameter spaces.
void cmd_compare(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out,
                 Index grid_points = 50);

struct EvalRequest {
  std::filesystem::path posterior;
  std::filesystem::path points;       // CSV with a header of parameter names
  std::vector<double> lower, upper;   // grid bounds, one per dimension (d <= 2)
  Index grid_points = 101;
};

//! Writes log-density values for points or a grid to `out` (a CSV file).
void cmd_eval(const EvalRequest& req, const std::filesystem::path& out);

//! Gaussian with the samples' weighted mean and covariance.
GaussianMixture moment_match(const Mat& samples, const Vec& weights, std::vector<std::string> names);

//! Writes `j` to `path` via a temporary file and rename.
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

} // namespace snpe
