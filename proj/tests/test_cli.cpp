#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "snpe/experiment.hpp"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace snpe;
namespace fs = std::filesystem;

namespace {

std::string tool() {
  const char* p = std::getenv("SNPEKIT");
  REQUIRE_MESSAGE(p != nullptr, "SNPEKIT must point at the snpekit binary");
  return p;
}

fs::path presets() {
  const char* p = std::getenv("SNPE_CONFIGS");
  REQUIRE_MESSAGE(p != nullptr, "SNPE_CONFIGS must point at the preset directory");
  return p;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("snpekit_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args, const fs::path& log) {
  const std::string cmd = tool() + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#')
      continue;
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ','))
      row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
  const auto it = std::find(header.begin(), header.end(), name);
  REQUIRE(it != header.end());
  return static_cast<std::size_t>(it - header.begin());
}

const char* kSmallGm = R"(name: small-gm
seed: 3
simulator:
  kind: gm
  variant: common-mean
prior:
  kind: box
  lower: [-10]
  upper: [10]
observation:
  x: [0.0]
snpe:
  rounds: 2
  simulations: 200
  components: 2
  hidden: [10, 10]
  epochs: 20
)";

} // namespace

TEST_CASE("every preset parses") {
  for (const char* name : {"gm-common", "gm-bimodal", "glm10", "autapse", "hh12", "hh12-gru"}) {
    CAPTURE(name);
    const ExperimentConfig c = load_experiment(presets() / (std::string(name) + ".yaml"));
    CHECK(c.name == name);
  }
}

TEST_CASE("config validation is line-anchored") {
  const fs::path dir = scratch("validation");
  const fs::path bad = write(dir / "bad.yaml", "name: x\nsimulator:\n  kind: hh\n  dt: -0.1\n");
  const Result r = run("simulate --config " + bad.string() + " --out " + (dir / "o").string(), dir / "log");
  CHECK(r.code == 2);
  CHECK(r.output.find("line 4") != std::string::npos);

  const fs::path unknown = write(dir / "unknown.yaml", "name: x\nsimulator:\n  kind: gm\n  sigma3: 1\n");
  const Result u = run("infer --config " + unknown.string() + " --out " + (dir / "o").string(), dir / "log2");
  CHECK(u.code == 2);
  CHECK(u.output.find("unknown key 'sigma3'") != std::string::npos);
  CHECK(u.output.find("line 4") != std::string::npos);

  CHECK_THROWS_AS(parse_experiment("simulator: {kind: gm}\nsnpe: {rounds: 0}\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("simulator: {kind: autapse}\nobservation: {theta: [1, 2, 3]}\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("simulator: {kind: gm}\nmethod: mcmc\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("simulator: {kind: gm}\nseed: 1\nseed: 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("simulator: {kind: gm}\nfeatures: {kind: gru}\n"), ConfigError);
  CHECK(run("frobnicate", dir / "log3").code == 2);
}

TEST_CASE("autapse simulation settles at the fixed point") {
  const fs::path dir = scratch("autapse");
  std::string text = slurp(presets() / "autapse.yaml");
  text.replace(text.find("noise: 0.5"), 10, "noise: 0.0");
  const fs::path cfg = write(dir / "autapse.yaml", text);
  const Result r = run("simulate --config " + cfg.string() + " --theta 0.75,1 --out " + (dir / "o").string(), dir / "log");
  REQUIRE(r.code == 0);
  const auto trace = read_csv(dir / "o" / "trace_0000.csv");
  // r* = I / (1 - J) = 4
  CHECK(std::stod(trace.back()[1]) == doctest::Approx(4.0).epsilon(1e-6));
  const auto features = read_csv(dir / "o" / "features.csv");
  CHECK(features[1][column(features[0], "bad")] == "0");
}

TEST_CASE("hh without current does not spike") {
  const fs::path dir = scratch("hh");
  std::string text = slurp(presets() / "hh12.yaml");
  text.replace(text.find("amplitude: 3.0"), 14, "amplitude: 0.0");
  const fs::path cfg = write(dir / "hh.yaml", text);
  const Result r = run("simulate --config " + cfg.string() + " --no-traces --out " + (dir / "o").string(), dir / "log");
  REQUIRE(r.code == 0);
  const auto rows = read_csv(dir / "o" / "features.csv");
  CHECK(std::stod(rows[1][column(rows[0], "spike_count")]) == 0.0);
  CHECK(!fs::exists(dir / "o" / "trace_0000.csv"));

  const Result draws = run("simulate --config " + cfg.string() + " --prior-draws 3 --out " + (dir / "p").string(), dir / "log2");
  REQUIRE(draws.code == 0);
  CHECK(read_csv(dir / "p" / "features.csv").size() == 4);
  CHECK(fs::exists(dir / "p" / "trace_0002.csv"));
}

TEST_CASE("infer is reproducible and worker-independent") {
  const fs::path dir = scratch("infer");
  const fs::path cfg = write(dir / "gm.yaml", kSmallGm);
  REQUIRE(run("infer --config " + cfg.string() + " --out " + (dir / "a").string(), dir / "la").code == 0);
  REQUIRE(run("infer --config " + cfg.string() + " --out " + (dir / "b").string(), dir / "lb").code == 0);
  REQUIRE(run("infer --config " + cfg.string() + " --workers 3 --out " + (dir / "c").string(), dir / "lc").code == 0);
  const std::string a = slurp(dir / "a" / "posterior.json");
  CHECK(!a.empty());
  CHECK(a == slurp(dir / "b" / "posterior.json"));
  CHECK(a == slurp(dir / "c" / "posterior.json"));
  CHECK(slurp(dir / "a" / "round_02" / "simulations.csv") == slurp(dir / "c" / "round_02" / "simulations.csv"));
  const GaussianMixture post = load_mixture(dir / "a" / "posterior.json");
  CHECK(post.dim() == 1);

  const auto manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(manifest["status"] == "complete");
  CHECK(manifest["rounds"].size() == 2);
  for (const auto& f : manifest["files"])
    CHECK(fs::exists(dir / "a" / f.get<std::string>()));
  for (const auto& r : manifest["rounds"])
    CHECK(fs::exists(dir / "a" / r["directory"].get<std::string>() / "posterior.json"));
  CHECK(!fs::exists(dir / "a" / "manifest.json.tmp"));
  // same run directory contents are enough to rerun
  REQUIRE(run("infer --config " + (dir / "a" / "config.yaml").string() + " --out " + (dir / "d").string(), dir / "ld").code == 0);
  CHECK(a == slurp(dir / "d" / "posterior.json"));

  REQUIRE(run("infer --config " + cfg.string() + " --seed 4 --out " + (dir / "e").string(), dir / "le").code == 0);
  CHECK(a != slurp(dir / "e" / "posterior.json"));
}

TEST_CASE("failed runs leave a partial manifest") {
  const fs::path dir = scratch("failed");
  const fs::path cfg = write(dir / "rej.yaml", R"(name: tight
simulator: {kind: gm}
observation: {x: [0.0]}
method: rejection
rejection: {eps: 1.0e-12, simulations: 100}
)");
  const Result r = run("infer --config " + cfg.string() + " --out " + (dir / "o").string(), dir / "log");
  CHECK(r.code == 3);
  const auto manifest = nlohmann::json::parse(slurp(dir / "o" / "manifest.json"));
  CHECK(manifest["status"] == "failed");
  CHECK(manifest["error"].get<std::string>().find("tolerance") != std::string::npos);
}

TEST_CASE("compare tables") {
  const fs::path dir = scratch("compare");
  const fs::path cfg = write(dir / "gm.yaml", kSmallGm);
  REQUIRE(run("infer --config " + cfg.string() + " --out " + (dir / "run").string(), dir / "l1").code == 0);
  const Result same = run("compare " + (dir / "run").string() + " " + (dir / "run").string() + " --grid 11 --out " +
                              (dir / "cmp").string(),
                          dir / "l2");
  REQUIRE(same.code == 0);
  const auto diff = read_csv(dir / "cmp" / "differences.csv");
  REQUIRE(diff.size() == 2);
  CHECK(std::stod(diff[1][column(diff[0], "mean_difference")]) == 0.0);
  CHECK(std::stod(diff[1][column(diff[0], "sd_ratio")]) == 1.0);
  CHECK(read_csv(dir / "cmp" / "summary.csv").size() == 3);

  // two-dimensional posteriors get a marginal grid per pair
  GaussianMixture g2(Gaussian{Vec::Zero(2), Mat::Identity(2, 2)});
  g2.names = {"a", "b"};
  fs::create_directories(dir / "two");
  std::ofstream(dir / "two" / "posterior.json") << to_json(g2).dump();
  fs::create_directories(dir / "two_b");
  fs::copy_file(dir / "two" / "posterior.json", dir / "two_b" / "posterior.json");
  cmd_compare({dir / "two", dir / "two_b"}, dir / "cmp2", 5);
  CHECK(read_csv(dir / "cmp2" / "marginal_a_b.csv").size() == 1 + 2 * 25);

  const Result mixed = run("compare " + (dir / "run").string() + " " + (dir / "two").string() + " --out " +
                               (dir / "cmp3").string(),
                           dir / "l3");
  CHECK(mixed.code == 2);
  CHECK_THROWS_AS(cmd_compare({dir / "run", dir / "two"}, dir / "cmp4"), IncompatibleRuns);
}

TEST_CASE("eval densities") {
  const fs::path dir = scratch("eval");
  for (Index d : {1, 3}) {
    GaussianMixture g(Gaussian{Vec::Zero(d), Mat::Identity(d, d)});
    const fs::path post = dir / ("std" + std::to_string(d) + ".json");
    std::ofstream(post) << to_json(g).dump();
    std::string header, zeros;
    for (Index k = 0; k < d; ++k) {
      header += (k ? "," : "") + std::string("t") + std::to_string(k);
      zeros += (k ? "," : "") + std::string("0");
    }
    const fs::path pts = write(dir / "pts.csv", header + "\n" + zeros + "\n");
    const fs::path out = dir / ("out" + std::to_string(d) + ".csv");
    REQUIRE(run("eval " + post.string() + " --points " + pts.string() + " --out " + out.string(), dir / "log").code == 0);
    const auto rows = read_csv(out);
    CHECK(std::stod(rows[1].back()) == doctest::Approx(-0.9189385332046727 * double(d)).epsilon(1e-12));
  }

  // a bounded-looking mixture still has unbounded support
  GaussianMixture m(Vec::Constant(2, 0.5), {Vec::Constant(1, -1.0), Vec::Constant(1, 2.0)},
                    {Mat::Constant(1, 1, 0.5), Mat::Constant(1, 1, 1.5)});
  std::ofstream(dir / "mix.json") << to_json(m).dump();
  REQUIRE(run("eval " + (dir / "mix.json").string() + " --lower -15 --upper 15 --grid 3001 --out " +
                  (dir / "grid.csv").string(),
              dir / "log")
              .code == 0);
  const auto rows = read_csv(dir / "grid.csv");
  double mass = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    mass += std::exp(std::stod(rows[i][1])) * 0.01;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(std::isfinite(std::stod(rows[1][1])));
  CHECK(std::stod(rows[1][0]) == -15.0);

  write(dir / "broken.json", "{not json");
  CHECK(run("eval " + (dir / "broken.json").string() + " --lower 0 --upper 1 --out " + (dir / "x.csv").string(),
            dir / "log")
            .code == 2);
}
