#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgfn/env.hpp"
#include "sgfn/policy.hpp"
#include "sgfn/trainer.hpp"

namespace sgfn {

/// Raised for malformed or out-of-range configuration; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EnvSpec {
  std::string kind = "tree";  // tree | hypergrid | one_more_mode
  // tree and one_more_mode
  std::size_t branching = 3;
  std::size_t depth = 3;
  std::vector<double> leaf_rewards;  // tree only; empty means all ones
  // hypergrid
  std::size_t dim = 2;
  std::size_t side = 8;
  std::optional<double> r0;  // unset: 10^(-2 log2(H/8) - 1)
  double r1 = 0.5;
  double r2 = 2.0;
  // one_more_mode
  double epsilon = 0.1;
  std::string stage = "promoted";  // previous | promoted
};

struct EvalSpec {
  std::size_t samples = 100000;
  bool oracle = true;
};

struct CertifySpec {
  std::size_t m = 1000;
  std::size_t n = 1000;
  double confidence = 0.95;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "sgfn_out";
  EnvSpec env;
  ModelSpec model;
  TrainConfig train;
  EvalSpec eval;
  CertifySpec certify;
};

/// Parses JSON text. Unknown keys, wrong types and invalid values raise ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// Every field with its effective value, as JSON text that parse_config accepts.
std::string resolved_config_json(const ExperimentConfig& config);

EnvSpec parse_env_spec(const std::string& json_text);
std::string env_spec_json(const EnvSpec& spec);

std::shared_ptr<const DagEnv> make_env(const EnvSpec& spec);

}  // namespace sgfn
