#pragma once

// Subcommand bodies behind the `cam` executable. Each writes its artifacts
// into a per-run directory under the output root.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cam/cam_core.hpp"
#include "cam/checkpoint.hpp"
#include "cam/config.hpp"
#include "cam/error.hpp"
#include "cam/evaluator.hpp"
#include "cam/gradcheck.hpp"
#include "cam/graph.hpp"
#include "cam/trainer.hpp"
#include "cam/worlds.hpp"

namespace cam {

namespace fs = std::filesystem;

namespace detail {

inline std::ofstream open_output(const fs::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

inline std::string file_digest(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw LoadError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline fs::path prepare_run_dir(const RunConfig& rc, const std::string& command, const std::string& salt = "") {
  const std::string name = rc.values.at("/output/run"_json_pointer).get<std::string>();
  const std::string tag = salt.empty() ? rc.hash() : config_hash(json{{"config", rc.hash()}, {"salt", salt}});
  const fs::path dir = rc.output_root() / (name.empty() ? command + "-" + tag : name);
  write_resolved_config(rc, dir);
  return dir;
}

inline nlohmann::ordered_json vec_json(const Eigen::VectorXd& v) {
  auto a = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline void write_trajectories(std::ostream& os, const EvalResult& r) {
  for (std::size_t k = 0; k < r.logs.size(); ++k) {
    for (const LogRecord& rec : r.logs[k]) {
      nlohmann::ordered_json j;
      j["task_seed"] = r.metrics.seeds[k];
      j["t"] = rec.t;
      j["agent"] = rec.agent;
      j["state"] = vec_json(rec.state);
      j["action"] = rec.action.size() > 0 ? vec_json(rec.action) : nlohmann::ordered_json(nullptr);
      j["collision"] = rec.collision;
      j["goal"] = rec.goal;
      os << j.dump() << '\n';
    }
  }
}

/// Loads a checkpoint for `rc` and enforces the environment and hash checks.
inline CamModel load_for(const fs::path& checkpoint, const RunConfig& rc, bool config_given, bool force) {
  CheckpointInfo info;
  CamModel model = load_model(checkpoint, &info);
  if (model.env() != rc.env())
    throw ContractError("checkpoint " + checkpoint.string() + " holds a model for " + to_string(model.env()) +
                        " but the run is configured for " + to_string(rc.env()));
  if (config_given && !force && !info.config_hash.empty() && info.config_hash != rc.model_hash())
    throw ConfigError("checkpoint was trained under config hash " + info.config_hash +
                      " but the given config resolves to " + rc.model_hash() + " (use --force to override)");
  return model;
}

}  // namespace detail

/// Reads the environment tag of a checkpoint so a run config can default to it.
inline std::string checkpoint_env(const fs::path& checkpoint) {
  CheckpointInfo info;
  load_model(checkpoint, &info);
  return to_string(info.shape.env);
}

struct TrainOutcome {
  fs::path run_dir;
  TrainResult result;
};

inline TrainOutcome cmd_train(const RunConfig& rc, std::ostream& out = std::cout) {
  const fs::path dir = detail::prepare_run_dir(rc, "train");
  const fs::path ckpt_dir = dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  std::ofstream telemetry = detail::open_output(dir / "telemetry.jsonl");
  TrainHooks hooks;
  hooks.telemetry = &telemetry;
  const std::string mhash = rc.model_hash();
  hooks.checkpoint = [&](const CamModel& m, const std::string& tag) { save_model(ckpt_dir / (tag + ".cam"), m, mhash); };
  TrainOutcome o{dir, train(rc.model_shape(), rc.task(), rc.train(), hooks)};
  telemetry.flush();
  out << "episodes " << o.result.episodes_run << ", updates " << o.result.updates
      << (o.result.early_stopped ? ", stopped early" : "") << "\n"
      << "checkpoint " << (ckpt_dir / "final.cam").string() << "\n";
  return o;
}

struct EvalRequest {
  fs::path checkpoint;
  bool config_given = false;
  bool force = false;
};

inline fs::path cmd_eval(const RunConfig& rc, const EvalRequest& req, std::ostream& out = std::cout) {
  const CamModel model = detail::load_for(req.checkpoint, rc, req.config_given, req.force);
  const fs::path dir = detail::prepare_run_dir(rc, "eval", detail::file_digest(req.checkpoint));
  EvalOptions opt = rc.eval_options();
  const TaskSpec base = rc.eval_task();
  const int tasks = rc.values.at("/eval/tasks"_json_pointer).get<int>();
  const auto sweep_agents = rc.values.at("/eval/sweep/agents"_json_pointer).get<std::vector<int>>();
  const auto sweep_obstacles = rc.values.at("/eval/sweep/obstacles"_json_pointer).get<std::vector<int>>();

  std::ofstream metrics = detail::open_output(dir / "metrics.csv");
  write_metrics_header(metrics);
  if (!sweep_agents.empty() || !sweep_obstacles.empty()) {
    const std::vector<int> a = sweep_agents.empty() ? std::vector<int>{base.agents} : sweep_agents;
    const std::vector<int> o = sweep_obstacles.empty() ? std::vector<int>{base.obstacles} : sweep_obstacles;
    opt.keep_log = false;
    for (const SweepRow& row : density_sweep(model, base, a, o, tasks, opt)) {
      write_metrics_row(metrics, row.agents, row.obstacles, row.metrics);
      out << row.agents << " agents, " << row.obstacles << " obstacles: safety " << row.metrics.safety_rate
          << ", success " << row.metrics.success_rate << "\n";
    }
  } else {
    const auto specs = seeded_tasks(base, tasks);
    const EvalResult r = evaluate(model, specs, opt);
    write_metrics_row(metrics, base.agents, base.obstacles, r.metrics);
    if (opt.keep_log) {
      std::ofstream traj = detail::open_output(dir / "trajectories.jsonl");
      detail::write_trajectories(traj, r);
    }
    out << "safety " << r.metrics.safety_rate << ", reward " << r.metrics.reward << ", success "
        << r.metrics.success_rate << ", decision ms mean " << r.metrics.decision_ms_mean << " max "
        << r.metrics.decision_ms_max << "\n";
  }
  out << "metrics " << (dir / "metrics.csv").string() << "\n";
  return dir;
}

inline fs::path cmd_chase(const RunConfig& rc, const EvalRequest& req, std::ostream& out = std::cout) {
  const CamModel model = detail::load_for(req.checkpoint, rc, req.config_given, req.force);
  const fs::path dir = detail::prepare_run_dir(rc, "chase", detail::file_digest(req.checkpoint));
  const TaskSpec base = rc.chase_task();
  const Metrics m = run_chasing(model, base, rc.values.at("/chase/tasks"_json_pointer).get<int>(), rc.eval_options());
  std::ofstream metrics = detail::open_output(dir / "metrics.csv");
  write_metrics_header(metrics);
  write_metrics_row(metrics, base.agents, base.obstacles, m);
  out << "safety " << m.safety_rate << ", chase reward " << m.reward << "\n"
      << "metrics " << (dir / "metrics.csv").string() << "\n";
  return dir;
}

/// Returns true when every environment passes.
inline bool cmd_gradcheck(const RunConfig& rc, const std::vector<EnvKind>& envs, bool corrupt,
                          std::ostream& out = std::cout) {
  const fs::path dir = detail::prepare_run_dir(rc, corrupt ? "gradcheck-corrupt" : "gradcheck");
  const json& g = rc.values.at("gradcheck");
  auto report = nlohmann::ordered_json::array();
  bool ok = true;
  for (EnvKind env : envs) {
    GradcheckOptions o;
    o.env = env;
    o.draws = g.at("draws").get<int>();
    o.hidden = g.at("hidden").get<int>();
    o.layers = g.at("layers").get<int>();
    o.batch = g.at("batch").get<int>();
    o.eps = g.at("eps").get<double>();
    o.tolerance = g.at("tolerance").get<double>();
    o.corrupt = corrupt;
    o.seed = rc.seed();
    const GradcheckReport r = run_gradcheck(o);
    ok = ok && r.passed();
    report.push_back(r.to_json());
    out << to_string(env) << ": max rel err " << r.max_rel_error << " (admissible " << r.max_term_error[0]
        << ", inadmissible " << r.max_term_error[1] << ", invariance " << r.max_term_error[2] << ") over "
        << r.draws << " draws -> " << (r.passed() ? "PASS" : "FAIL") << "\n";
  }
  std::ofstream os = detail::open_output(dir / "gradcheck.json");
  os << report.dump(2) << '\n';
  return ok;
}

inline fs::path cmd_landscape(const RunConfig& rc, const EvalRequest& req, std::ostream& out = std::cout) {
  const CamModel model = detail::load_for(req.checkpoint, rc, req.config_given, req.force);
  const fs::path dir = detail::prepare_run_dir(rc, "landscape", detail::file_digest(req.checkpoint));
  const json& l = rc.values.at("landscape");
  TaskSpec spec = rc.eval_task();
  spec.seed = l.at("task_seed").get<std::uint64_t>();
  const WorldState w = sample_task(spec);
  const int agent = l.at("agent").get<int>();
  if (agent < 0 || agent >= w.agent_count()) throw ContractError("landscape.agent is out of range");
  const Observation obs = observe(w, agent);
  const auto fixed_values = l.at("fixed").get<std::vector<double>>();
  Eigen::VectorXd fixed = Eigen::VectorXd::Zero(model.action_width());
  if (!fixed_values.empty()) {
    if (static_cast<int>(fixed_values.size()) != model.action_width())
      throw ConfigError("landscape.fixed: expected " + std::to_string(model.action_width()) + " values");
    for (std::size_t i = 0; i < fixed_values.size(); ++i) fixed[static_cast<Eigen::Index>(i)] = fixed_values[i];
  }
  auto dims = l.at("dims").get<std::vector<int>>();
  if (model.action_width() == 1 && dims == std::vector<int>{0, 1}) dims = {0, 0};  // default dims on a 1-D box
  const auto rows = export_landscape(model, obs, dims[0], dims[1], l.at("resolution").get<int>(), fixed);
  std::ofstream os = detail::open_output(dir / "landscape.csv");
  write_landscape(os, rows);
  out << rows.size() << " grid points -> " << (dir / "landscape.csv").string() << "\n";
  return dir;
}

}  // namespace cam
