#include "sgfn/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sgfn {

using nlohmann::json;

namespace {

// JSON has no infinities; they are written as strings.
json number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double read_number(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw std::invalid_argument("expected a number");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

// --------------------------------------------------------------- checkpoint

Checkpoint make_checkpoint(const Trainer& trainer, const EnvSpec& env) {
  Checkpoint ck;
  ck.env = env;
  ck.model = trainer.model();
  ck.optimizer = trainer.optimizer();
  ck.seed = trainer.config().seed;
  ck.round = trainer.state().round;
  ck.c = trainer.state().c;
  ck.c_initialized = trainer.state().c_initialized;
  ck.patience_counter = trainer.state().patience_counter;
  ck.buffer = trainer.state().buffer.items();
  return ck;
}

std::string checkpoint_json(const Checkpoint& ck) {
  json j;
  j["format"] = "sgfn-checkpoint";
  j["version"] = kCheckpointVersion;
  j["env"] = json::parse(env_spec_json(ck.env));
  const ModelSpec& s = ck.model.spec;
  j["model"]["spec"] = {{"kind", s.kind},
                        {"hidden", s.hidden},
                        {"learned_backward", s.learned_backward},
                        {"flow_head", s.flow_head},
                        {"log_z_init", s.log_z_init}};
  json slices = json::array();
  for (const auto& sl : ck.model.params.slices()) {
    const auto v = ck.model.params.slice(sl.name);
    slices.push_back({{"name", sl.name}, {"values", std::vector<double>(v.begin(), v.end())}});
  }
  j["model"]["slices"] = slices;
  const auto& o = ck.optimizer;
  j["optimizer"] = {{"step", o.step_count()},
                    {"beta1", o.options().beta1},
                    {"beta2", o.options().beta2},
                    {"eps", o.options().eps},
                    {"learning_rates", o.learning_rates()},
                    {"m", o.first_moment()},
                    {"v", o.second_moment()}};
  json buf = json::array();
  for (const auto& [state, reward] : ck.buffer) buf.push_back({state, reward});
  j["trainer"] = {{"seed", ck.seed},
                  {"round", ck.round},
                  {"c", number(ck.c)},
                  {"c_initialized", ck.c_initialized},
                  {"patience_counter", ck.patience_counter},
                  {"buffer", buf}};
  return j.dump();
}

Checkpoint parse_checkpoint(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "sgfn-checkpoint") throw std::invalid_argument("not an sgfn checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw std::invalid_argument("unsupported checkpoint version");
    Checkpoint ck;
    ck.env = parse_env_spec(j.at("env").dump());
    const auto env = make_env(ck.env);
    const json& ms = j.at("model").at("spec");
    ModelSpec spec;
    spec.kind = ms.at("kind").get<std::string>();
    spec.hidden = ms.at("hidden").get<std::size_t>();
    spec.learned_backward = ms.at("learned_backward").get<bool>();
    spec.flow_head = ms.at("flow_head").get<bool>();
    spec.log_z_init = ms.at("log_z_init").get<double>();
    Rng rng(0);
    ck.model = PolicyModel::create(*env, spec, rng);
    const json& slices = j.at("model").at("slices");
    if (slices.size() != ck.model.params.slices().size())
      throw std::invalid_argument("checkpoint does not match the environment's model shape");
    for (const json& sl : slices) {
      const auto name = sl.at("name").get<std::string>();
      const auto values = sl.at("values").get<std::vector<double>>();
      if (!ck.model.params.has_slice(name)) throw std::invalid_argument("checkpoint has unknown slice " + name);
      auto dst = ck.model.params.slice(name);
      if (dst.size() != values.size())
        throw std::invalid_argument("checkpoint slice " + name + " does not match the environment");
      std::copy(values.begin(), values.end(), dst.begin());
    }
    const json& o = j.at("optimizer");
    AdamOptimizer::Options opts{o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
    ck.optimizer = AdamOptimizer(ck.model.params, 1.0, opts);
    ck.optimizer.restore(o.at("step").get<std::uint64_t>(), o.at("m").get<std::vector<double>>(),
                         o.at("v").get<std::vector<double>>(),
                         o.at("learning_rates").get<std::map<std::string, double>>(), opts);
    const json& t = j.at("trainer");
    ck.seed = t.at("seed").get<std::uint64_t>();
    ck.round = t.at("round").get<std::size_t>();
    ck.c = read_number(t.at("c"));
    ck.c_initialized = t.at("c_initialized").get<bool>();
    ck.patience_counter = t.at("patience_counter").get<std::size_t>();
    for (const json& b : t.at("buffer")) ck.buffer.emplace_back(b.at(0).get<StateId>(), b.at(1).get<double>());
    return ck;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed checkpoint: ") + e.what());
  }
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) { write_text_file(path, checkpoint_json(ck)); }

Checkpoint read_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

// ----------------------------------------------------------------- reports

std::string certificate_json(const CertificateReport& r) {
  json trace = json::array();
  for (const auto& [c, v] : r.trace) trace.push_back({number(c), number(v)});
  json j = {{"kind", r.kind},
            {"scope", r.scope},
            {"status", r.status},
            {"bound", number(r.bound)},
            {"raw_bound", number(r.raw_bound)},
            {"main_term", number(r.main_term)},
            {"sampling_term", number(r.sampling_term)},
            {"c", number(r.c)},
            {"max_delta_ratio", number(r.max_delta_ratio)},
            {"alpha", r.alpha},
            {"confidence", r.confidence},
            {"m", r.m},
            {"n", r.n},
            {"c_lo", number(r.c_lo)},
            {"c_hi", number(r.c_hi)},
            {"optimized", r.optimized},
            {"captured_reward", number(r.captured_reward)},
            {"z_estimate", number(r.z_estimate)},
            {"wall_seconds", r.wall_seconds},
            {"trace", trace}};
  return j.dump(2);
}

std::string eval_report_json(const EvalReport& r) {
  json j = {{"empirical_total_l1", number(r.empirical_l1)},
            {"modes", r.modes},
            {"mode_regions", r.mode_regions},
            {"samples", r.samples}};
  j["exact_tv"] = r.exact_tv >= 0.0 ? json(r.exact_tv) : json(nullptr);
  return j.dump(2);
}

// ------------------------------------------------------------ trajectories

void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> taus, double log_z) {
  for (const auto& t : taus) {
    json j = {{"states", t.states},
              {"log_pf", t.log_pf},
              {"log_pb", t.log_pb},
              {"reward", t.reward},
              {"provenance", to_string(t.provenance)},
              {"log_z", log_z}};
    out << j.dump() << '\n';
  }
}

std::vector<LoggedTrajectory> read_trajectories_jsonl(std::istream& in) {
  std::vector<LoggedTrajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      LoggedTrajectory lt;
      lt.tau.states = j.at("states").get<std::vector<StateId>>();
      lt.tau.log_pf = j.at("log_pf").get<double>();
      lt.tau.log_pb = j.at("log_pb").get<double>();
      lt.tau.reward = j.at("reward").get<double>();
      lt.tau.provenance = provenance_from_string(j.at("provenance").get<std::string>());
      lt.log_z = j.at("log_z").get<double>();
      out.push_back(std::move(lt));
    } catch (const json::exception& e) {
      throw std::invalid_argument("trajectory log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sgfn
