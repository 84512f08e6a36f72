#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "sgfn/io.hpp"
#include "sgfn/oracle.hpp"

using namespace sgfn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Fresh scratch directory removed at scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("sgfn_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::string read(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

// Checkpoint holding the exactly balanced tabular model on tree(3, 2).
std::string balanced_checkpoint(const TempDir& dir) {
  Checkpoint ck;
  ck.env.kind = "tree";
  ck.env.branching = 3;
  ck.env.depth = 2;
  const auto env = make_env(ck.env);
  ck.model = balanced_tabular_model(*env, true, false);
  ck.model.spec.kind = "tabular";
  ck.optimizer = AdamOptimizer(ck.model.params, 1e-3);
  ck.seed = 5;
  const std::string path = dir.file("balanced.json");
  write_checkpoint(path, ck);
  return path;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run_cli({"train"}).code == cli::kExitUsage);
  CHECK(run_cli({"certify", "/nonexistent/ck.json"}).code == cli::kExitUsage);
  CHECK(run_cli({"verify", "--suite", "no_such_suite"}).code == cli::kExitUsage);
  CHECK(run_cli({"--help"}).code == cli::kExitOk);

  TempDir dir("usage");
  write(dir.file("bad.json"), R"({"train": {"unknown_key": 1}})");
  const auto r = run_cli({"train", dir.file("bad.json"), "-o", dir.file("out")});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("unknown_key") != std::string::npos);
}

TEST_CASE("train with zero rounds writes headers only") {
  TempDir dir("zero");
  write(dir.file("cfg.json"), R"({"env": {"kind": "tree", "branching": 2, "depth": 2}, "model": {"kind": "tabular"}})");
  const auto r = run_cli({"train", dir.file("cfg.json"), "-o", dir.file("out"), "--max-rounds", "0"});
  CHECK(r.code == cli::kExitOk);
  CHECK(count_lines(read(dir.file("out/metrics.csv"))) == 1);
  CHECK(fs::exists(dir.file("out/resolved_config.json")));
  CHECK_FALSE(fs::exists(dir.file("out/certificate.json")));
}

TEST_CASE("train writes metrics, checkpoint and certificate; output dir precedence") {
  TempDir dir("train");
  write(dir.file("cfg.json"), R"({"seed": 3, "output_dir": ")" + dir.file("from_config") +
                                  R"(", "env": {"kind": "tree", "branching": 2, "depth": 2},
                                  "model": {"kind": "tabular"},
                                  "train": {"max_rounds": 40, "eval_every": 10},
                                  "certify": {"m": 100, "n": 100}})");
  auto r = run_cli({"train", dir.file("cfg.json"), "-q"});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(count_lines(read(dir.file("from_config/metrics.csv"))) == 41);
  CHECK(fs::exists(dir.file("from_config/checkpoint.json")));
  const auto cert = nlohmann::json::parse(read(dir.file("from_config/certificate.json")));
  CHECK(cert.at("bound").get<double>() >= 0.0);
  CHECK(cert.at("bound").get<double>() <= 1.0);

  ::setenv(cli::kOutputDirEnv, dir.file("from_env").c_str(), 1);
  r = run_cli({"train", dir.file("cfg.json"), "-q", "--max-rounds", "2"});
  CHECK(r.code == cli::kExitOk);
  CHECK(fs::exists(dir.file("from_env/metrics.csv")));
  r = run_cli({"train", dir.file("cfg.json"), "-q", "--max-rounds", "2", "-o", dir.file("from_flag")});
  ::unsetenv(cli::kOutputDirEnv);
  CHECK(r.code == cli::kExitOk);
  CHECK(fs::exists(dir.file("from_flag/metrics.csv")));
}

TEST_CASE("certify a balanced checkpoint") {
  TempDir dir("certify");
  const std::string ck = balanced_checkpoint(dir);
  const auto r = run_cli({"certify", ck, "-m", "1000", "-n", "1000", "--alpha", "0.025", "--scope", "global"});
  REQUIRE(r.code == cli::kExitOk);
  const auto cert = nlohmann::json::parse(read(dir.file("certificate.json")));
  CHECK(cert.at("bound").get<double>() == doctest::Approx(2.0 * std::log(40.0) / 1000.0).epsilon(1e-9));
  CHECK(cert.at("bound").get<double>() == doctest::Approx(0.0074).epsilon(0.01));
  CHECK(count_lines(read(dir.file("certificate_trajectories.jsonl"))) == 2000);
  CHECK(r.out.find("bound ") != std::string::npos);

  CHECK(run_cli({"certify", ck, "-m", "0"}).code == cli::kExitUsage);
  CHECK(run_cli({"certify", ck, "--alpha", "0.5"}).code == cli::kExitUsage);
  CHECK(run_cli({"certify", ck, "--scope", "local"}).code == cli::kExitUsage);
}

TEST_CASE("evaluate a balanced checkpoint") {
  TempDir dir("evaluate");
  const std::string ck = balanced_checkpoint(dir);
  const auto r = run_cli({"evaluate", ck, "-s", "5000", "-o", dir.file("ev")});
  REQUIRE(r.code == cli::kExitOk);
  const auto ev = nlohmann::json::parse(read(dir.file("ev/eval.json")));
  CHECK(ev.at("exact_tv").get<double>() < 1e-12);
  CHECK(ev.at("samples").get<std::size_t>() == 5000);
  CHECK(ev.at("empirical_total_l1").get<double>() < 0.1);
}

TEST_CASE("verify runs selected suites") {
  auto r = run_cli({"verify", "--list"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("bound_monotone") != std::string::npos);
  r = run_cli({"verify", "--suite", "bound_monotone", "--suite", "one_more_mode_tv"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("PASS bound_monotone") != std::string::npos);
  CHECK(r.out.find("2/2 suites passed") != std::string::npos);
}
