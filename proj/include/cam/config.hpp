#pragma once

// Run configuration: per-environment defaults, a JSON file merged on top,
// and dotted `key=value` overrides. Unknown keys and type mismatches are
// reported with the full dotted field name.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cam/cam_core.hpp"
#include "cam/checkpoint.hpp"
#include "cam/error.hpp"
#include "cam/evaluator.hpp"
#include "cam/trainer.hpp"
#include "cam/worlds.hpp"

namespace cam {

using json = nlohmann::json;

inline json default_config(EnvKind env) {
  const TrainConfig t = default_train_config(env);
  const bool single = !is_graph_env(env);
  const SingleAgentLayout layout;
  json regions = json::array();
  for (const Rect& r : layout.regions) regions.push_back({r.x0, r.y0, r.x1, r.y1});
  json task = {{"agents", single ? 1 : 3},
               {"obstacles", single ? 0 : 3},
               {"map_side", single ? 6.0 : 3.0},
               {"horizon", 128},
               {"layout",
                {{"start", {layout.start.x(), layout.start.y()}},
                 {"start_x_jitter", layout.start_x_jitter},
                 {"start_heading", layout.start_heading},
                 {"goal", {layout.goal.x(), layout.goal.y()}},
                 {"regions", regions}}}};
  return {
      {"env", to_string(env)},
      {"seed", 0},
      {"model", {{"backbone", single ? "mlp" : "gnn"}, {"hidden", 64}, {"layers", single ? 2 : 3}}},
      {"task", task},
      {"train",
       {{"gamma1", t.gamma1},
        {"gamma2", t.gamma2},
        {"gamma3", t.gamma3},
        {"lambda", t.lambda},
        {"candidates", t.candidates},
        {"relabel_probes", t.relabel_probes},
        {"batch_size", t.batch_size},
        {"update_every", t.update_every},
        {"gradient_steps", t.gradient_steps},
        {"episodes", t.episodes},
        {"noise_fraction", t.noise_fraction},
        {"epsilon", t.epsilon},
        {"buffer_capacity", t.buffer_capacity},
        {"lr", t.lr},
        {"min_lr", t.min_lr},
        {"plateau_patience", t.plateau_patience},
        {"validation_interval", t.validation_interval},
        {"validation_episodes", t.validation_episodes},
        {"early_stop_rounds", t.early_stop_rounds},
        {"early_stop_success", t.early_stop_success}}},
      {"eval",
       {{"agents", single ? 1 : 3},
        {"obstacles", single ? 0 : 3},
        {"map_side", single ? 6.0 : 3.0},
        {"horizon", 128},
        {"tasks", 20},
        {"task_seed", 1000000},
        {"candidates", 2000},
        {"decomposition", true},
        {"caps", {{"agents", 2}, {"obstacles", 9}}},
        {"adaptive_chunk", 0},
        {"trajectories", false},
        {"sweep", {{"agents", json::array()}, {"obstacles", json::array()}}}}},
      {"chase", {{"agents", 32}, {"obstacles", 0}, {"map_side", 8.0}, {"horizon", 128}, {"tasks", 20}, {"task_seed", 2000000}}},
      {"gradcheck", {{"draws", 100}, {"hidden", 8}, {"layers", 2}, {"batch", 16}, {"eps", 1e-4}, {"tolerance", 1e-5}}},
      {"landscape",
       {{"task_seed", 0}, {"agent", 0}, {"dims", {0, 1}}, {"resolution", 41}, {"fixed", json::array()}}},
      {"output", {{"root", "runs"}, {"run", ""}}},
  };
}

namespace detail {

inline const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

/// Checks `user` against the shape of `ref`: every key must exist in `ref`
/// and carry a compatible type. Integers are accepted where reals are.
inline void check_against(const json& ref, const json& user, const std::string& path) {
  if (ref.is_object()) {
    if (!user.is_object()) throw ConfigError(path + ": expected an object, got " + type_name(user));
    for (auto it = user.begin(); it != user.end(); ++it) {
      const std::string field = path.empty() ? it.key() : path + "." + it.key();
      if (!ref.contains(it.key())) throw ConfigError(field + ": unknown field");
      check_against(ref.at(it.key()), it.value(), field);
    }
    return;
  }
  const bool ok = (ref.is_boolean() && user.is_boolean()) ||
                  (ref.is_number_integer() && user.is_number_integer()) ||
                  (ref.is_number_float() && user.is_number()) || (ref.is_string() && user.is_string()) ||
                  (ref.is_array() && user.is_array());
  if (!ok) throw ConfigError(path + ": expected " + type_name(ref) + ", got " + type_name(user));
}

/// Stores integers given for real-valued fields as reals so that `3` and
/// `3.0` resolve, and hash, identically.
inline void normalize_numbers(const json& ref, json& v) {
  if (ref.is_object()) {
    for (auto it = v.begin(); it != v.end(); ++it)
      if (ref.contains(it.key())) normalize_numbers(ref.at(it.key()), it.value());
    return;
  }
  if (ref.is_array() && !ref.empty() && v.is_array()) {
    for (auto& x : v) normalize_numbers(ref.front(), x);
    return;
  }
  if (ref.is_number_float() && v.is_number_integer()) v = v.get<double>();
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string pointer_path(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override '" + dotted + "': empty key segment");
    p += "/" + part;
  }
  return p;
}

}  // namespace detail

/// Parses `key=value`; the value is read as JSON when possible and as a
/// plain string otherwise.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  const json::json_pointer ptr(detail::pointer_path(key));
  if (!cfg.contains(ptr)) throw ConfigError(key + ": unknown field");
  cfg[ptr] = value;
}

inline std::string config_hash(const json& j) {
  const std::string canonical = j.dump();  // object keys are sorted
  return detail::hex64(fnv1a64(canonical.data(), canonical.size()));
}

struct RunConfig {
  json values;
  std::string source;                  // config file, empty when built from defaults
  std::vector<std::string> overrides;  // in application order

  EnvKind env() const { return env_from_string(values.at("env").get<std::string>()); }
  std::uint64_t seed() const { return values.at("seed").get<std::uint64_t>(); }

  /// Hash of everything except output placement.
  std::string hash() const {
    json j = values;
    j.erase("output");
    return config_hash(j);
  }

  /// Hash of the fields that determine a trained model; carried by checkpoints.
  std::string model_hash() const {
    return config_hash({{"env", values.at("env")},
                        {"seed", values.at("seed")},
                        {"model", values.at("model")},
                        {"task", values.at("task")},
                        {"train", values.at("train")}});
  }

  ModelShape model_shape() const {
    ModelShape s;
    s.env = env();
    s.backbone = backbone_from_string(values.at("/model/backbone"_json_pointer).get<std::string>());
    s.hidden = values.at("/model/hidden"_json_pointer).get<int>();
    s.layers = values.at("/model/layers"_json_pointer).get<int>();
    return s;
  }

  TaskSpec task() const {
    const json& t = values.at("task");
    TaskSpec s;
    s.env = env();
    s.agents = t.at("agents").get<int>();
    s.obstacles = t.at("obstacles").get<int>();
    s.map_side = t.at("map_side").get<double>();
    s.horizon = t.at("horizon").get<int>();
    const json& l = t.at("layout");
    s.layout.start = {l.at("start").at(0).get<double>(), l.at("start").at(1).get<double>()};
    s.layout.start_x_jitter = l.at("start_x_jitter").get<double>();
    s.layout.start_heading = l.at("start_heading").get<double>();
    s.layout.goal = {l.at("goal").at(0).get<double>(), l.at("goal").at(1).get<double>()};
    s.layout.regions.clear();
    for (const json& r : l.at("regions"))
      s.layout.regions.push_back({r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()});
    return s;
  }

  TrainConfig train() const {
    const json& t = values.at("train");
    TrainConfig c;
    c.gamma1 = t.at("gamma1").get<double>();
    c.gamma2 = t.at("gamma2").get<double>();
    c.gamma3 = t.at("gamma3").get<double>();
    c.lambda = t.at("lambda").get<double>();
    c.candidates = t.at("candidates").get<int>();
    c.relabel_probes = t.at("relabel_probes").get<int>();
    c.batch_size = t.at("batch_size").get<int>();
    c.update_every = t.at("update_every").get<int>();
    c.gradient_steps = t.at("gradient_steps").get<int>();
    c.episodes = t.at("episodes").get<int>();
    c.noise_fraction = t.at("noise_fraction").get<double>();
    c.epsilon = t.at("epsilon").get<double>();
    c.buffer_capacity = t.at("buffer_capacity").get<std::size_t>();
    c.lr = t.at("lr").get<double>();
    c.min_lr = t.at("min_lr").get<double>();
    c.plateau_patience = t.at("plateau_patience").get<int>();
    c.validation_interval = t.at("validation_interval").get<int>();
    c.validation_episodes = t.at("validation_episodes").get<int>();
    c.early_stop_rounds = t.at("early_stop_rounds").get<int>();
    c.early_stop_success = t.at("early_stop_success").get<double>();
    c.seed = seed();
    return c;
  }

  /// Evaluation task template built from the `eval` section.
  TaskSpec eval_task() const {
    const json& e = values.at("eval");
    TaskSpec s = task();
    s.agents = e.at("agents").get<int>();
    s.obstacles = e.at("obstacles").get<int>();
    s.map_side = e.at("map_side").get<double>();
    s.horizon = e.at("horizon").get<int>();
    s.seed = e.at("task_seed").get<std::uint64_t>();
    return s;
  }

  EvalOptions eval_options() const {
    const json& e = values.at("eval");
    EvalOptions o;
    o.candidates = e.at("candidates").get<int>();
    o.decompose = e.at("decomposition").get<bool>();
    o.caps.max_agent_edges = e.at("/caps/agents"_json_pointer).get<int>();
    o.caps.max_obstacle_edges = e.at("/caps/obstacles"_json_pointer).get<int>();
    o.adaptive_chunk = e.at("adaptive_chunk").get<int>();
    o.keep_log = e.at("trajectories").get<bool>();
    o.seed = seed();
    return o;
  }

  TaskSpec chase_task() const {
    const json& c = values.at("chase");
    TaskSpec s = task();
    s.mode = TaskMode::kChasing;
    s.agents = c.at("agents").get<int>();
    s.obstacles = c.at("obstacles").get<int>();
    s.map_side = c.at("map_side").get<double>();
    s.horizon = c.at("horizon").get<int>();
    s.seed = c.at("task_seed").get<std::uint64_t>();
    return s;
  }

  std::filesystem::path output_root() const {
    if (const char* env_root = std::getenv("CAM_OUTPUT_ROOT"); env_root && *env_root) return env_root;
    return values.at("/output/root"_json_pointer).get<std::string>();
  }

  nlohmann::ordered_json resolved() const {
    nlohmann::ordered_json j;
    j["config"] = nlohmann::ordered_json::parse(values.dump());
    j["source"] = source;
    j["overrides"] = overrides;
    j["hash"] = hash();
    j["model_hash"] = model_hash();
    return j;
  }
};

/// Rejects configurations that parse but cannot run.
inline void validate_config(const RunConfig& rc) {
  const json& v = rc.values;
  try {
    const ModelShape shape = rc.model_shape();
    if (is_graph_env(shape.env) != (shape.backbone == Backbone::kGnn))
      throw ConfigError("model.backbone: " + to_string(shape.env) + " requires " + (is_graph_env(shape.env) ? "gnn" : "mlp"));
    if (shape.hidden < 1) throw ConfigError("model.hidden must be >= 1");
    if (shape.layers < 1) throw ConfigError("model.layers must be >= 1");
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model.backbone: ") + e.what());
  }
  const json& l = v.at("/task/layout"_json_pointer);
  if (l.at("start").size() != 2) throw ConfigError("task.layout.start: expected [x, y]");
  if (l.at("goal").size() != 2) throw ConfigError("task.layout.goal: expected [x, y]");
  for (std::size_t i = 0; i < l.at("regions").size(); ++i) {
    const json& r = l.at("regions")[i];
    if (!r.is_array() || r.size() != 4 || !std::all_of(r.begin(), r.end(), [](const json& x) { return x.is_number(); }))
      throw ConfigError("task.layout.regions[" + std::to_string(i) + "]: expected [x0, y0, x1, y1]");
  }
  for (const char* section : {"task", "eval", "chase"}) {
    const json& s = v.at(section);
    if (s.at("agents").get<int>() < 0) throw ConfigError(std::string(section) + ".agents must be >= 0");
    if (s.at("obstacles").get<int>() < 0) throw ConfigError(std::string(section) + ".obstacles must be >= 0");
    if (!(s.at("map_side").get<double>() > 0)) throw ConfigError(std::string(section) + ".map_side must be positive");
    if (s.at("horizon").get<int>() < 0) throw ConfigError(std::string(section) + ".horizon must be >= 0");
  }
  if (!is_graph_env(rc.env()) && v.at("/task/agents"_json_pointer).get<int>() != 1)
    throw ConfigError("task.agents: " + to_string(rc.env()) + " is a single-agent environment");
  if (v.at("/eval/tasks"_json_pointer).get<int>() < 1) throw ConfigError("eval.tasks must be >= 1");
  if (v.at("/eval/candidates"_json_pointer).get<int>() < 1) throw ConfigError("eval.candidates must be >= 1");
  if (v.at("/eval/caps/agents"_json_pointer).get<int>() < 1 && v.at("/eval/caps/obstacles"_json_pointer).get<int>() < 1)
    throw ConfigError("eval.caps: at least one cap must be positive");
  for (const char* k : {"agents", "obstacles"})
    for (const json& x : v.at("/eval/sweep"_json_pointer).at(k))
      if (!x.is_number_integer() || x.get<int>() < 0) throw ConfigError(std::string("eval.sweep.") + k + ": expected non-negative integers");
  if (v.at("/chase/tasks"_json_pointer).get<int>() < 1) throw ConfigError("chase.tasks must be >= 1");
  const json& dims = v.at("/landscape/dims"_json_pointer);
  if (dims.size() != 2 || !dims[0].is_number_integer() || !dims[1].is_number_integer())
    throw ConfigError("landscape.dims: expected two integer action dimensions");
  check_train_config(rc.train());
}

/// Builds a resolved configuration. `file` may be empty, in which case `env`
/// must name the environment; overrides are applied last.
inline RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                             const std::string& env_hint = "") {
  json user = json::object();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    try {
      user = json::parse(is, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
    if (!user.is_object()) throw ConfigError(file.string() + ": top level must be an object");
  }
  std::string env_name = env_hint;
  if (user.contains("env")) {
    if (!user["env"].is_string()) throw ConfigError("env: expected string, got " + std::string(detail::type_name(user["env"])));
    env_name = user["env"].get<std::string>();
  }
  for (const auto& o : overrides)
    if (o.rfind("env=", 0) == 0) env_name = o.substr(4);
  if (env_name.empty()) throw ConfigError("env: required field is missing");
  EnvKind env;
  try {
    env = env_from_string(env_name);
  } catch (const ContractError&) {
    throw ConfigError("env: unknown environment '" + env_name + "'");
  }

  RunConfig rc;
  rc.values = default_config(env);
  const json ref = rc.values;
  detail::check_against(ref, user, "");
  rc.values.merge_patch(user);
  for (const auto& o : overrides) {
    apply_override(rc.values, o);
    rc.overrides.push_back(o);
  }
  detail::check_against(ref, rc.values, "");
  detail::normalize_numbers(ref, rc.values);
  rc.values["env"] = to_string(env);
  rc.source = file.string();
  validate_config(rc);
  return rc;
}

inline void write_resolved_config(const RunConfig& rc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw IoError("cannot write " + (dir / "config.json").string());
  os << rc.resolved().dump(2) << '\n';
}

}  // namespace cam
