#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "sgfn/certify.hpp"
#include "sgfn/config.hpp"
#include "sgfn/io.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/policy.hpp"
#include "sgfn/trainer.hpp"
#include "sgfn/verify.hpp"

namespace sgfn::cli {

namespace fs = std::filesystem;

namespace {

/// Usage-level problems detected after argument parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string output_dir(const std::string& flag, const std::optional<std::string>& configured,
                       const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  if (configured) return *configured;
  return fallback;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

struct CertifyInputs {
  std::size_t m = 0;
  std::size_t n = 0;
  double alpha = 0.0;
  bool global = true;
};

/// Draws m backward and n on-policy forward trajectories and optimizes the
/// reference-flow certificate. Global scope samples x from the exact target;
/// subgraph scope samples x from the buffer.
CertificateReport certify_model(const PolicyModel& model, const DagEnv& env,
                                const std::vector<std::pair<StateId, double>>& buffer, const CertifyInputs& in,
                                Rng& rng, std::vector<Trajectory>* used = nullptr) {
  const double log_z = model.log_z();
  std::optional<TargetSampler> sampler;
  std::vector<StateId> support;
  if (in.global) {
    sampler = TargetSampler::from_env(env);
  } else {
    if (buffer.empty()) throw UsageError("subgraph certificate needs a non-empty buffer in the checkpoint");
    std::vector<double> weights;
    for (const auto& [s, r] : buffer) {
      support.push_back(s);
      weights.push_back(r);
    }
    sampler.emplace(support, weights);
  }
  const auto back = sample_target_trajectories(model, env, *sampler, rng, in.m);
  const auto fwd = sample_forward_batch(model, env, rng, in.n, 0.0);
  const auto bs = flow_samples(back, log_z);
  const auto fs = flow_samples(fwd, log_z);
  CertificateReport rep;
  if (in.global) {
    rep = optimize_certificate(bs, fs, in.alpha);
    rep.captured_reward = sampler->total_weight();
    rep.z_estimate = std::exp(log_z);
  } else {
    rep = subgraph_certificate(support, bs, fs, in.alpha, log_z, sampler->total_weight(), true);
  }
  if (used != nullptr) {
    used->insert(used->end(), back.begin(), back.end());
    used->insert(used->end(), fwd.begin(), fwd.end());
  }
  return rep;
}

void print_certificate(std::ostream& out, const CertificateReport& rep) {
  out << "certificate (" << rep.scope << ", " << rep.status << "): TV <= " << fmt(rep.bound) << " at confidence "
      << fmt(rep.confidence) << "  [c=" << fmt(rep.c) << " main=" << fmt(rep.main_term)
      << " sampling=" << fmt(rep.sampling_term) << " m=" << rep.m << " n=" << rep.n << "]\n";
}

struct LoadedCheckpoint {
  Checkpoint ck;
  std::shared_ptr<const DagEnv> env;
  std::optional<ExperimentConfig> config;
};

LoadedCheckpoint load_checkpoint_and_config(const std::string& checkpoint_path, const std::string& config_path) {
  LoadedCheckpoint lc;
  if (!fs::exists(checkpoint_path)) throw UsageError("checkpoint not found: " + checkpoint_path);
  try {
    lc.ck = read_checkpoint(checkpoint_path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot load checkpoint: ") + e.what());
  }
  if (!config_path.empty()) {
    lc.config = load_config(config_path);
    if (env_spec_json(lc.config->env) != env_spec_json(lc.ck.env))
      throw UsageError("checkpoint environment does not match the configuration's environment");
  }
  lc.env = make_env(lc.ck.env);
  return lc;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config;
  std::string output;
  std::optional<std::size_t> max_rounds;
  std::optional<std::uint64_t> seed;
  std::size_t print_every = 100;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.max_rounds) cfg.train.max_rounds = *a.max_rounds;
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.train.seed = *a.seed;
  }
  cfg.train.validate();
  const std::string dir = output_dir(a.output, cfg.output_dir, "sgfn_out");
  cfg.output_dir = dir;

  const auto env = make_env(cfg.env);
  Rng init_rng = make_rng(cfg.seed, "init");
  PolicyModel model = PolicyModel::create(*env, cfg.model, init_rng);
  Trainer trainer(env, std::move(model), cfg.train);

  fs::create_directories(dir);
  write_text_file((fs::path(dir) / "resolved_config.json").string(), resolved_config_json(cfg));
  std::ofstream csv(fs::path(dir) / "metrics.csv");
  if (!csv) throw std::runtime_error("cannot write metrics.csv in " + dir);
  csv << metrics_csv_header() << '\n';
  csv.flush();

  trainer.run([&](const RoundMetrics& m) {
    csv << metrics_csv_row(m) << '\n';
    if (!a.quiet && a.print_every > 0 && (m.round % a.print_every == 0 || m.exited)) {
      out << "round " << m.round << " loss " << fmt(m.mean_loss) << " c " << fmt(m.c) << " buffer "
          << m.buffer_size;
      if (m.exact_tv) out << " tv " << fmt(*m.exact_tv);
      if (m.certificate_computed) out << " bound " << fmt(m.certificate_bound);
      out << '\n';
    }
  });
  csv.close();

  write_checkpoint((fs::path(dir) / "checkpoint.json").string(), make_checkpoint(trainer, cfg.env));
  const std::size_t rounds = trainer.state().round;
  if (rounds == 0) {
    out << "no training rounds requested; wrote headers and configuration to " << dir << '\n';
    return kExitOk;
  }

  CertificateReport final_cert;
  if (const CertificateReport* last = trainer.last_certificate(); last != nullptr && trainer.state().exited) {
    final_cert = *last;
  } else {
    CertifyInputs in{cfg.certify.m, cfg.certify.n, alpha_from_confidence(cfg.certify.confidence), cfg.eval.oracle};
    Rng rng = make_rng(cfg.seed, "final_certificate");
    final_cert = certify_model(trainer.model(), *env, trainer.state().buffer.items(), in, rng);
  }
  write_text_file((fs::path(dir) / "certificate.json").string(), certificate_json(final_cert));

  out << "trained " << rounds << " rounds" << (trainer.state().exited ? " (early exit)" : "") << '\n';
  print_certificate(out, final_cert);
  if (cfg.eval.oracle) out << "exact TV " << fmt(exact_tv(trainer.model(), *env)) << '\n';
  out << "outputs in " << dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- certify

struct CertifyArgs {
  std::string checkpoint;
  std::string config;
  std::string output;
  std::optional<std::size_t> m;
  std::optional<std::size_t> n;
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  std::string scope = "auto";
};

int cmd_certify(const CertifyArgs& a, std::ostream& out) {
  const LoadedCheckpoint lc = load_checkpoint_and_config(a.checkpoint, a.config);
  CertifyInputs in;
  in.m = a.m.value_or(lc.config ? lc.config->certify.m : 1000);
  in.n = a.n.value_or(lc.config ? lc.config->certify.n : 1000);
  in.alpha = a.alpha.value_or(alpha_from_confidence(lc.config ? lc.config->certify.confidence : 0.95));
  if (in.m == 0 || in.n == 0) throw UsageError("m and n must be positive");
  if (!(in.alpha > 0.0 && in.alpha < 0.5)) throw UsageError("alpha must lie in (0, 0.5)");
  if (a.scope == "auto") {
    in.global = lc.config ? lc.config->eval.oracle : true;
  } else {
    in.global = a.scope == "global";
  }

  const std::uint64_t seed = a.seed.value_or(lc.ck.seed);
  Rng rng = make_rng(seed, "certify");
  std::vector<Trajectory> used;
  const CertificateReport rep = certify_model(lc.ck.model, *lc.env, lc.ck.buffer, in, rng, &used);

  const std::optional<std::string> configured =
      lc.config ? std::optional<std::string>(lc.config->output_dir) : std::nullopt;
  const std::string dir = output_dir(a.output, configured, fs::path(a.checkpoint).parent_path().string());
  const fs::path base = dir.empty() ? fs::path(".") : fs::path(dir);
  write_text_file((base / "certificate.json").string(), certificate_json(rep));
  fs::create_directories(base);
  std::ofstream traj(base / "certificate_trajectories.jsonl");
  write_trajectories_jsonl(traj, used, lc.ck.model.log_z());
  print_certificate(out, rep);
  out << "bound " << std::setprecision(17) << rep.bound << '\n';
  return kExitOk;
}

// --------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string config;
  std::string output;
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> seed;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const LoadedCheckpoint lc = load_checkpoint_and_config(a.checkpoint, a.config);
  const std::size_t count = a.samples.value_or(lc.config ? lc.config->eval.samples : 100000);
  if (count == 0) throw UsageError("sample count must be positive");
  const bool oracle = lc.config ? lc.config->eval.oracle : true;

  Rng rng = make_rng(a.seed.value_or(lc.ck.seed), "evaluate");
  std::vector<StateId> terminals;
  terminals.reserve(count);
  for (const auto& t : sample_forward_batch(lc.ck.model, *lc.env, rng, count, 0.0, false)) terminals.push_back(t.terminal());

  EvalReport rep;
  rep.samples = count;
  rep.empirical_l1 = empirical_total_l1(terminals, *lc.env);
  rep.modes = count_modes(terminals, *lc.env);
  rep.mode_regions = count_mode_regions(terminals, *lc.env);
  if (oracle) rep.exact_tv = exact_tv(lc.ck.model, *lc.env);

  const std::optional<std::string> configured =
      lc.config ? std::optional<std::string>(lc.config->output_dir) : std::nullopt;
  const std::string dir = output_dir(a.output, configured, fs::path(a.checkpoint).parent_path().string());
  write_text_file(((dir.empty() ? fs::path(".") : fs::path(dir)) / "eval.json").string(), eval_report_json(rep));

  out << "samples " << count << "  empirical total L1 " << fmt(rep.empirical_l1) << "  modes " << rep.modes
      << "  mode regions " << rep.mode_regions << '/' << total_mode_regions(*lc.env);
  if (oracle) out << "  exact TV " << fmt(rep.exact_tv);
  out << '\n';
  return kExitOk;
}

// ----------------------------------------------------------------- verify

struct VerifyArgs {
  std::vector<std::string> suites;
  std::uint64_t seed = 0;
  bool list = false;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  if (a.list) {
    for (const auto& s : verify_suites()) out << std::left << std::setw(22) << s.name << s.description << '\n';
    return kExitOk;
  }
  std::vector<SuiteResult> results;
  try {
    results = run_verify(a.suites, VerifyHooks::defaults(), a.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::size_t failed = 0;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << std::right << std::fixed
        << std::setprecision(2) << std::setw(8) << r.seconds << "s  " << std::defaultfloat << r.detail << '\n';
    if (!r.passed) ++failed;
  }
  out << results.size() - failed << '/' << results.size() << " suites passed\n";
  return failed == 0 ? kExitOk : kExitFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stable GFlowNet training and certification on finite DAGs", "sgfn"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a policy from an experiment configuration");
  train->add_option("config", ta.config, "Experiment configuration (JSON)")->required();
  train->add_option("-o,--output-dir", ta.output, "Output directory (overrides SGFN_OUTPUT_DIR and the config)");
  train->add_option("--max-rounds", ta.max_rounds, "Override train.max_rounds");
  train->add_option("--seed", ta.seed, "Override the global seed");
  train->add_option("--print-every", ta.print_every, "Progress line cadence in rounds (0 disables)");
  train->add_flag("-q,--quiet", ta.quiet, "Suppress progress lines");

  CertifyArgs ca;
  auto* certify = app.add_subcommand("certify", "Certify a checkpoint with fresh samples");
  certify->add_option("checkpoint", ca.checkpoint, "Checkpoint file")->required();
  certify->add_option("-c,--config", ca.config, "Configuration the checkpoint was trained with");
  certify->add_option("-m", ca.m, "Backward (target) sample count");
  certify->add_option("-n", ca.n, "Forward (model) sample count");
  certify->add_option("--alpha", ca.alpha, "Per-side failure probability; confidence is 1 - 2 alpha");
  certify->add_option("--seed", ca.seed, "Sampling seed (defaults to the checkpoint's)");
  certify->add_option("--scope", ca.scope, "global, subgraph or auto")
      ->check(CLI::IsMember({"auto", "global", "subgraph"}));
  certify->add_option("-o,--output-dir", ca.output, "Output directory");

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint against the target distribution");
  evaluate->add_option("checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evaluate->add_option("-c,--config", ea.config, "Configuration the checkpoint was trained with");
  evaluate->add_option("-s,--samples", ea.samples, "Number of forward samples");
  evaluate->add_option("--seed", ea.seed, "Sampling seed (defaults to the checkpoint's)");
  evaluate->add_option("-o,--output-dir", ea.output, "Output directory");

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Run the property and oracle suites");
  verify->add_option("--suite", va.suites, "Run only the named suite (repeatable)");
  verify->add_option("--seed", va.seed, "Suite seed");
  verify->add_flag("--list", va.list, "List suites and exit");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "sgfn: " << e.what() << '\n';
    if (!app.get_subcommands().empty()) {
      err << app.get_subcommands().front()->help();
    } else {
      err << app.help();
    }
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*certify) return cmd_certify(ca, out);
    if (*evaluate) return cmd_evaluate(ea, out);
    if (*verify) return cmd_verify(va, out);
  } catch (const ConfigError& e) {
    err << "sgfn: configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "sgfn: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "sgfn: invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "sgfn: error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace sgfn::cli
