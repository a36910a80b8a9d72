#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cam/commands.hpp"
#include "cam/config.hpp"
#include "cam/error.hpp"
#include "cam/runtime.hpp"

namespace {

using cam::ExitCode;

int code(ExitCode c) { return static_cast<int>(c); }

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("-s,--set", c.sets, "Override a config field, e.g. --set train.episodes=50")->type_name("KEY=VALUE");
}

template <class T>
void push_if(std::vector<std::string>& sets, const std::optional<T>& v, const std::string& key) {
  if (v) sets.push_back(key + "=" + nlohmann::json(*v).dump());
}

std::string join_ints(const std::vector<int>& v) { return nlohmann::json(v).dump(); }

}  // namespace

int main(int argc, char** argv) {
  cam::tune_allocator();
  CLI::App app{"Control admissibility models: training, evaluation and analysis"};
  app.require_subcommand(1);

  Common train_c;
  auto* train = app.add_subcommand("train", "Train a model from a config");
  add_common(train, train_c);

  struct CheckpointArgs {
    Common common;
    std::string checkpoint;
    bool force = false;
    std::optional<int> agents, obstacles, tasks;
    std::optional<std::uint64_t> task_seed;
  };

  CheckpointArgs eval_a;
  std::optional<bool> decomposition;
  std::vector<int> caps, sweep_agents, sweep_obstacles;
  bool trajectories = false;
  std::optional<int> candidates;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on seeded navigation tasks");
  add_common(eval, eval_a.common);
  eval->add_option("checkpoint,--checkpoint", eval_a.checkpoint, "Model checkpoint")->required();
  eval->add_option("--agents", eval_a.agents);
  eval->add_option("--obstacles", eval_a.obstacles);
  eval->add_option("--tasks", eval_a.tasks, "Number of seeded tasks");
  eval->add_option("--task-seed", eval_a.task_seed, "Seed of the first task");
  eval->add_option("--candidates", candidates);
  eval->add_flag("--decomposition,!--no-decomposition", decomposition, "Score through subgraph decomposition");
  eval->add_option("--caps", caps, "Subgraph caps: AGENTS,OBSTACLES")->delimiter(',')->expected(2);
  eval->add_option("--sweep-agents", sweep_agents, "Density sweep agent counts")->delimiter(',');
  eval->add_option("--sweep-obstacles", sweep_obstacles, "Density sweep obstacle counts")->delimiter(',');
  eval->add_flag("--trajectories", trajectories, "Write per-tick trajectory records");
  eval->add_flag("--force", eval_a.force, "Accept a checkpoint trained under a different config hash");

  CheckpointArgs chase_a;
  auto* chase = app.add_subcommand("chase", "Evaluate a checkpoint on the chasing game");
  add_common(chase, chase_a.common);
  chase->add_option("checkpoint,--checkpoint", chase_a.checkpoint, "Model checkpoint")->required();
  chase->add_option("--agents", chase_a.agents);
  chase->add_option("--obstacles", chase_a.obstacles);
  chase->add_option("--tasks", chase_a.tasks);
  chase->add_option("--task-seed", chase_a.task_seed);
  std::optional<bool> chase_decomposition;
  chase->add_flag("--decomposition,!--no-decomposition", chase_decomposition);
  chase->add_flag("--force", chase_a.force);

  Common grad_c;
  std::string grad_env;
  bool all_envs = false, corrupt = false;
  std::optional<int> draws;
  auto* grad = app.add_subcommand("gradcheck", "Compare loss gradients with finite differences");
  add_common(grad, grad_c);
  grad->add_option("--env", grad_env, "Environment to check");
  grad->add_flag("--all-envs", all_envs, "Check every environment");
  grad->add_option("--draws", draws, "Random models per environment");
  grad->add_flag("--corrupt-gradient", corrupt, "Perturb the analytic gradient (negative control)");

  CheckpointArgs land_a;
  std::vector<int> dims;
  std::optional<int> resolution, agent;
  auto* land = app.add_subcommand("landscape", "Export phi over a 2D slice of the action box");
  add_common(land, land_a.common);
  land->add_option("checkpoint,--checkpoint", land_a.checkpoint, "Model checkpoint")->required();
  land->add_option("--task-seed", land_a.task_seed);
  land->add_option("--agent", agent);
  land->add_option("--dims", dims, "Action dimensions I,J")->delimiter(',')->expected(2);
  land->add_option("--resolution", resolution);
  land->add_flag("--force", land_a.force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return code(ExitCode::kUsage);
  }

  try {
    if (*train) {
      const cam::RunConfig rc = cam::load_config(train_c.config, train_c.sets);
      cam::cmd_train(rc);
      return code(ExitCode::kOk);
    }

    auto checkpoint_config = [](CheckpointArgs& a, std::vector<std::string> extra) {
      std::vector<std::string> sets = a.common.sets;
      sets.insert(sets.end(), extra.begin(), extra.end());
      const std::string env_hint = a.common.config.empty() ? cam::checkpoint_env(a.checkpoint) : "";
      return cam::load_config(a.common.config, sets, env_hint);
    };
    auto request = [](const CheckpointArgs& a) {
      return cam::EvalRequest{a.checkpoint, !a.common.config.empty(), a.force};
    };

    if (*eval) {
      std::vector<std::string> extra;
      push_if(extra, eval_a.agents, "eval.agents");
      push_if(extra, eval_a.obstacles, "eval.obstacles");
      push_if(extra, eval_a.tasks, "eval.tasks");
      push_if(extra, eval_a.task_seed, "eval.task_seed");
      push_if(extra, candidates, "eval.candidates");
      push_if(extra, decomposition, "eval.decomposition");
      if (!caps.empty()) {
        extra.push_back("eval.caps.agents=" + std::to_string(caps[0]));
        extra.push_back("eval.caps.obstacles=" + std::to_string(caps[1]));
      }
      if (!sweep_agents.empty()) extra.push_back("eval.sweep.agents=" + join_ints(sweep_agents));
      if (!sweep_obstacles.empty()) extra.push_back("eval.sweep.obstacles=" + join_ints(sweep_obstacles));
      if (trajectories) extra.push_back("eval.trajectories=true");
      cam::cmd_eval(checkpoint_config(eval_a, extra), request(eval_a));
      return code(ExitCode::kOk);
    }
    if (*chase) {
      std::vector<std::string> extra;
      push_if(extra, chase_a.agents, "chase.agents");
      push_if(extra, chase_a.obstacles, "chase.obstacles");
      push_if(extra, chase_a.tasks, "chase.tasks");
      push_if(extra, chase_a.task_seed, "chase.task_seed");
      push_if(extra, chase_decomposition, "eval.decomposition");
      cam::cmd_chase(checkpoint_config(chase_a, extra), request(chase_a));
      return code(ExitCode::kOk);
    }
    if (*grad) {
      std::vector<std::string> sets = grad_c.sets;
      push_if(sets, draws, "gradcheck.draws");
      const cam::RunConfig rc = cam::load_config(grad_c.config, sets, grad_env.empty() ? "car" : grad_env);
      std::vector<cam::EnvKind> envs{rc.env()};
      if (all_envs)
        envs = {cam::EnvKind::kCar, cam::EnvKind::kDynDubins, cam::EnvKind::kDrone, cam::EnvKind::kIntegrator,
                cam::EnvKind::kDubinsSingle};
      return cam::cmd_gradcheck(rc, envs, corrupt) ? code(ExitCode::kOk) : code(ExitCode::kNumeric);
    }
    if (*land) {
      std::vector<std::string> extra;
      push_if(extra, land_a.task_seed, "landscape.task_seed");
      push_if(extra, agent, "landscape.agent");
      push_if(extra, resolution, "landscape.resolution");
      if (!dims.empty()) extra.push_back("landscape.dims=" + join_ints(dims));
      cam::cmd_landscape(checkpoint_config(land_a, extra), request(land_a));
      return code(ExitCode::kOk);
    }
  } catch (const cam::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return code(ExitCode::kConfig);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return code(ExitCode::kIo);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return code(ExitCode::kInternal);
  }
  return code(ExitCode::kUsage);
}
