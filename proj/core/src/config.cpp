#include "sgfn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sgfn {

using nlohmann::json;

namespace {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(label(key) + " must be a number");
      out = v->get<double>();
    }
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(label(key) + " must be a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }

  void read(const char* key, std::uint64_t& out, int) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(label(key) + " must be a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(label(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(label(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      seen_.insert(key);
      out.reset();
      return;
    }
    T value{};
    read(key, value);
    out = value;
  }

  void read(const char* key, std::vector<double>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(label(key) + " must be an array of numbers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number()) throw ConfigError(label(key) + " must be an array of numbers");
        out.push_back(x.get<double>());
      }
    }
  }

  const json* child(const char* key) { return take(key); }
  std::string label(const char* key = nullptr) const {
    if (!key) return path_.empty() ? "config" : path_;
    return path_.empty() ? std::string(key) : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown key: " + label(it.key().c_str()));
    }
  }

 private:
  const json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto translating(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const CapExceeded& e) {
    throw ConfigError(e.what());
  }
}

EnvSpec read_env(const json& j) {
  ObjectReader r(j, "env");
  EnvSpec s;
  r.read("kind", s.kind);
  r.read("branching", s.branching);
  r.read("depth", s.depth);
  r.read("leaf_rewards", s.leaf_rewards);
  r.read("dim", s.dim);
  r.read("side", s.side);
  r.read_optional("r0", s.r0);
  r.read("r1", s.r1);
  r.read("r2", s.r2);
  r.read("epsilon", s.epsilon);
  r.read("stage", s.stage);
  r.finish();
  if (s.kind != "tree" && s.kind != "hypergrid" && s.kind != "one_more_mode")
    throw ConfigError("env.kind must be tree, hypergrid or one_more_mode");
  if (s.stage != "previous" && s.stage != "promoted") throw ConfigError("env.stage must be previous or promoted");
  if (s.kind == "hypergrid" && !s.r0) s.r0 = translating([&] { return hypergrid_default_r0(s.side); });
  translating([&] { return make_env(s); });
  return s;
}

json env_json(const EnvSpec& s) {
  json j;
  j["kind"] = s.kind;
  if (s.kind == "tree" || s.kind == "one_more_mode") {
    j["branching"] = s.branching;
    j["depth"] = s.depth;
  }
  if (s.kind == "tree") j["leaf_rewards"] = s.leaf_rewards;
  if (s.kind == "one_more_mode") {
    j["epsilon"] = s.epsilon;
    j["stage"] = s.stage;
  }
  if (s.kind == "hypergrid") {
    j["dim"] = s.dim;
    j["side"] = s.side;
    j["r0"] = s.r0.value_or(hypergrid_default_r0(s.side));
    j["r1"] = s.r1;
    j["r2"] = s.r2;
  }
  return j;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::shared_ptr<const DagEnv> make_env(const EnvSpec& s) {
  if (s.kind == "tree") return std::make_shared<RegularTree>(s.branching, s.depth, s.leaf_rewards);
  if (s.kind == "hypergrid") {
    return std::make_shared<Hypergrid>(s.dim, s.side, s.r0.value_or(hypergrid_default_r0(s.side)), s.r1, s.r2);
  }
  if (s.kind == "one_more_mode") {
    auto pair = one_more_mode_tree(s.branching, s.depth, s.epsilon);
    return s.stage == "previous" ? pair.previous : pair.promoted;
  }
  throw ConfigError("unknown env kind: " + s.kind);
}

EnvSpec parse_env_spec(const std::string& json_text) { return read_env(parse_json(json_text)); }

std::string env_spec_json(const EnvSpec& spec) { return env_json(spec).dump(); }

ExperimentConfig parse_config(const std::string& text) {
  const json root = parse_json(text);
  ObjectReader r(root, "");
  ExperimentConfig c;
  r.read("seed", c.seed, 0);
  r.read("output_dir", c.output_dir);
  if (const json* e = r.child("env")) c.env = read_env(*e);

  bool flow_head_given = false;
  if (const json* m = r.child("model")) {
    ObjectReader mr(*m, "model");
    mr.read("kind", c.model.kind);
    mr.read("hidden", c.model.hidden);
    mr.read("learned_backward", c.model.learned_backward);
    flow_head_given = mr.has("flow_head");
    mr.read("flow_head", c.model.flow_head);
    mr.read("log_z_init", c.model.log_z_init);
    mr.finish();
    if (c.model.kind != "tabular" && c.model.kind != "mlp") throw ConfigError("model.kind must be tabular or mlp");
    if (c.model.kind == "mlp" && c.model.hidden < 1) throw ConfigError("model.hidden must be >= 1");
  }

  bool lr_given = false;
  if (const json* t = r.child("train")) {
    ObjectReader tr(*t, "train");
    TrainConfig& tc = c.train;
    std::string objective = to_string(tc.objective);
    std::string aggregation = to_string(tc.aggregation);
    std::string source = to_string(tc.backward_source);
    tr.read("objective", objective);
    tr.read("stabilized", tc.stabilized);
    tr.read("tv_target", tc.tv_target);
    tr.read("confidence", tc.confidence);
    tr.read("patience", tc.patience);
    tr.read("buffer_size", tc.buffer_size);
    tr.read("batch_size", tc.batch_size);
    tr.read("beta", tc.beta);
    tr.read("aggregation", aggregation);
    tr.read("epsilon", tc.epsilon);
    lr_given = tr.has("learning_rate");
    tr.read("learning_rate", tc.learning_rate);
    tr.read("log_z_lr_multiplier", tc.log_z_lr_multiplier);
    tr.read("grad_clip", tc.grad_clip);
    tr.read("replay_size", tc.replay_size);
    tr.read("replay_fraction", tc.replay_fraction);
    tr.read("max_rounds", tc.max_rounds);
    tr.read("subtb_lambda", tc.subtb_lambda);
    tr.read("backward_source", source);
    tr.read_optional("backward_in_gradient", tc.backward_in_gradient);
    tr.read_optional("initial_threshold", tc.initial_threshold);
    tr.read("early_exit", tc.early_exit);
    tr.read("eval_every", tc.eval_every);
    tr.finish();
    translating([&] {
      tc.objective = objective_from_string(objective);
      tc.aggregation = aggregation_from_string(aggregation);
      tc.backward_source = backward_source_from_string(source);
      return 0;
    });
  }
  if (!lr_given && c.env.kind == "hypergrid") c.train.learning_rate = 1e-4;
  if (!flow_head_given) c.model.flow_head = objective_needs_flow_head(c.train.objective);

  if (const json* e = r.child("eval")) {
    ObjectReader er(*e, "eval");
    er.read("samples", c.eval.samples);
    er.read("oracle", c.eval.oracle);
    er.finish();
  }
  if (const json* e = r.child("certify")) {
    ObjectReader cr(*e, "certify");
    cr.read("m", c.certify.m);
    cr.read("n", c.certify.n);
    cr.read("confidence", c.certify.confidence);
    cr.finish();
    if (c.certify.m == 0 || c.certify.n == 0) throw ConfigError("certify.m and certify.n must be >= 1");
    translating([&] { return alpha_from_confidence(c.certify.confidence); });
  }
  r.finish();

  c.train.seed = c.seed;
  c.train.oracle = c.eval.oracle;
  if (!c.train.backward_in_gradient) c.train.backward_in_gradient = c.train.uses_backward_in_gradient();
  translating([&] {
    c.train.validate();
    return 0;
  });
  if (objective_needs_flow_head(c.train.objective) && !c.model.flow_head)
    throw ConfigError("objective " + to_string(c.train.objective) + " needs model.flow_head = true");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string resolved_config_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["env"] = env_json(c.env);
  j["model"] = {{"kind", c.model.kind},
                {"hidden", c.model.hidden},
                {"learned_backward", c.model.learned_backward},
                {"flow_head", c.model.flow_head},
                {"log_z_init", c.model.log_z_init}};
  const TrainConfig& t = c.train;
  j["train"] = {{"objective", to_string(t.objective)},
                {"stabilized", t.stabilized},
                {"tv_target", t.tv_target},
                {"confidence", t.confidence},
                {"patience", t.patience},
                {"buffer_size", t.buffer_size},
                {"batch_size", t.batch_size},
                {"beta", t.beta},
                {"aggregation", to_string(t.aggregation)},
                {"epsilon", t.epsilon},
                {"learning_rate", t.learning_rate},
                {"log_z_lr_multiplier", t.log_z_lr_multiplier},
                {"grad_clip", t.grad_clip},
                {"replay_size", t.replay_size},
                {"replay_fraction", t.replay_fraction},
                {"max_rounds", t.max_rounds},
                {"subtb_lambda", t.subtb_lambda},
                {"backward_source", to_string(t.backward_source)},
                {"backward_in_gradient", t.uses_backward_in_gradient()},
                {"initial_threshold", t.initial_threshold ? json(*t.initial_threshold) : json(nullptr)},
                {"early_exit", t.early_exit},
                {"eval_every", t.eval_every}};
  j["eval"] = {{"samples", c.eval.samples}, {"oracle", c.eval.oracle}};
  j["certify"] = {{"m", c.certify.m}, {"n", c.certify.n}, {"confidence", c.certify.confidence}};
  return j.dump(2);
}

}  // namespace sgfn
