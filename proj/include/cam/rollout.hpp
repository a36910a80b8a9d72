#pragma once

// Episode runner shared by training and evaluation. Each tick every active
// agent observes its neighbourhood, scores freshly sampled candidate actions,
// picks one, and then all agents step together on the same snapshot.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "cam/cam_core.hpp"
#include "cam/graph.hpp"
#include "cam/parallel.hpp"
#include "cam/random.hpp"
#include "cam/worlds.hpp"

namespace cam {

inline const Eigen::MatrixXd& cached_drone_gain() {
  static const Eigen::MatrixXd gain = drone_lqr_gain();
  return gain;
}

/// Goal preference omega for a batch of candidate actions: L2 to the goal
/// after one step, or closeness to the LQR action for drones.
inline Eigen::VectorXd preference_scores(EnvKind env, const Eigen::VectorXd& state, const Eigen::Vector3d& goal,
                                         const Matrix& actions) {
  Eigen::VectorXd omega(actions.rows());
  if (env == EnvKind::kDrone) {
    const Eigen::VectorXd ref = drone_lqr_action(state, goal, cached_drone_gain());
    for (Eigen::Index i = 0; i < actions.rows(); ++i) omega[i] = -(actions.row(i).transpose() - ref).squaredNorm();
    return omega;
  }
  for (Eigen::Index i = 0; i < actions.rows(); ++i)
    omega[i] = preference_l2(env, state, goal, actions.row(i).transpose());
  return omega;
}

struct RolloutOptions {
  int candidates = 2000;
  double noise_fraction = 0.0;  // fallback noise, as a fraction of the box half-width
  double epsilon = 0.0;         // probability of a uniformly random candidate; off by default
  bool decompose = false;
  SubgraphCaps caps;
  int adaptive_chunk = 0;  // 0 scores every candidate
  bool keep_observations = false;
  bool keep_log = false;
  std::uint64_t seed = 0;
  std::vector<double>* decision_ms = nullptr;  // per-agent decision times, appended when set
};

/// Per-tick flags for one agent across the whole episode.
struct AgentTrajectory {
  std::vector<char> collision;
  std::vector<char> goal;
};

/// One decision of one agent, kept for building training transitions.
struct AgentStep {
  std::shared_ptr<const Observation> obs;
  Eigen::VectorXd action;
  bool collision_next = false;
  int t = 0;
};

struct LogRecord {
  int t = 0;
  int agent = 0;
  Eigen::VectorXd state;  // after the tick
  Eigen::VectorXd action;  // empty while parked at the goal
  bool collision = false;
  bool goal = false;
};

struct EpisodeResult {
  std::vector<AgentTrajectory> agents;
  std::vector<std::vector<AgentStep>> steps;  // per agent chain, when kept
  std::vector<std::shared_ptr<const Observation>> final_obs;
  std::vector<LogRecord> log;
  std::vector<double> chase_reward;  // per agent, chasing mode only
  int ticks = 0;
  double admissible_ratio = 0.0;  // mean over agent decisions
  int fallback_decisions = 0;
  int decisions = 0;
  int clamped_actions = 0;
  WorldState final_world;
};

namespace detail {

enum StreamTag : std::uint64_t { kCandidates = 1, kDecompose = 2, kNoise = 3, kEpsilon = 4 };

}  // namespace detail

/// Samples candidates and preferences for one agent and computes the hidden
/// state(s) they will be scored against.
inline AgentQuery prepare_query(const CamModel& model, const WorldState& w, int agent, const Observation& obs,
                                const RolloutOptions& opt, int tick) {
  const std::uint64_t a = static_cast<std::uint64_t>(agent);
  const std::uint64_t t = static_cast<std::uint64_t>(tick);
  Rng cand_rng = make_rng(opt.seed, {t, a, detail::kCandidates});
  Rng dec_rng = make_rng(opt.seed, {t, a, detail::kDecompose});
  const ActionBox box = action_box(w.env);
  AgentQuery q;
  q.actions = sample_box(cand_rng, opt.candidates, box.low, box.high);
  q.omega = preference_scores(w.env, w.agents[static_cast<std::size_t>(agent)], w.goals[static_cast<std::size_t>(agent)],
                              q.actions);
  q.hidden = hidden_states(model, obs, opt.decompose ? &opt.caps : nullptr, dec_rng);
  return q;
}

inline Selection choose(const ScoredActions& scored, EnvKind env, const RolloutOptions& opt, int agent, int tick) {
  const std::uint64_t a = static_cast<std::uint64_t>(agent);
  const std::uint64_t t = static_cast<std::uint64_t>(tick);
  const ActionBox box = action_box(env);
  if (opt.epsilon > 0.0) {
    Rng eps_rng = make_rng(opt.seed, {t, a, detail::kEpsilon});
    if (uniform(eps_rng, 0.0, 1.0) < opt.epsilon) {
      Selection s;
      s.index = static_cast<int>(eps_rng() % static_cast<std::uint64_t>(scored.size()));
      s.action = scored.actions.row(s.index).transpose();
      s.admissible = scored.phi[s.index] >= 0.0;
      return s;
    }
  }
  Rng noise_rng = make_rng(opt.seed, {t, a, detail::kNoise});
  return select_action(scored, opt.noise_fraction * box.half_width()[0], noise_rng, box);
}

/// Runs one episode from `world` for at most `horizon` ticks. Navigation ends
/// early once every agent has reached its goal; agents that arrive stay
/// parked in place and keep being collision-checked. Chasing runs the full
/// horizon with goals following the targets.
inline EpisodeResult run_episode(const CamModel& model, WorldState world, int horizon, const RolloutOptions& opt) {
  if (model.env() != world.env) throw ContractError("run_episode: model environment does not match the task");
  if (opt.candidates < 1) throw ContractError("run_episode: need at least one candidate action");
  const int n = world.agent_count();
  const bool chasing = !world.targets.empty();
  EpisodeResult r;
  r.agents.resize(static_cast<std::size_t>(n));
  r.chase_reward.assign(chasing ? static_cast<std::size_t>(n) : 0, 0.0);
  if (opt.keep_observations) r.steps.resize(static_cast<std::size_t>(n));
  if (world.reached.size() != static_cast<std::size_t>(n)) world.reached.assign(static_cast<std::size_t>(n), 0);
  double ratio_sum = 0.0;

  std::vector<std::shared_ptr<const Observation>> obs(static_cast<std::size_t>(n));
  std::vector<AgentQuery> queries(static_cast<std::size_t>(n));
  std::vector<Selection> chosen(static_cast<std::size_t>(n));
  std::vector<double> ratios(static_cast<std::size_t>(n), 0.0);
  for (int tick = 0; tick < horizon && n > 0; ++tick) {
    std::vector<int> active;
    for (int i = 0; i < n; ++i)
      if (chasing || !world.reached[static_cast<std::size_t>(i)]) active.push_back(i);
    if (active.empty()) break;
    const auto tick_start = std::chrono::steady_clock::now();

    parallel_for(active.size(), [&](std::size_t k) {
      const int i = active[k];
      obs[static_cast<std::size_t>(i)] = std::make_shared<const Observation>(observe(world, i));
      queries[static_cast<std::size_t>(i)] = prepare_query(model, world, i, *obs[static_cast<std::size_t>(i)], opt, tick);
    });

    std::vector<ScoredActions> scored(static_cast<std::size_t>(n));
    if (opt.adaptive_chunk > 0) {
      std::vector<AgentQuery> batch;
      batch.reserve(active.size());
      for (int i : active) batch.push_back(std::move(queries[static_cast<std::size_t>(i)]));
      auto out = adaptive_agent_scoring(model, batch, opt.adaptive_chunk);
      for (std::size_t k = 0; k < active.size(); ++k) scored[static_cast<std::size_t>(active[k])] = std::move(out[k]);
    } else {
      parallel_for(active.size(), [&](std::size_t k) {
        const auto i = static_cast<std::size_t>(active[k]);
        AgentQuery& q = queries[i];
        scored[i].phi = min_head_scores(model, q.hidden, q.actions);
        scored[i].actions = std::move(q.actions);
        scored[i].omega = std::move(q.omega);
      });
    }
    parallel_for(active.size(), [&](std::size_t k) {
      const int i = active[k];
      chosen[static_cast<std::size_t>(i)] = choose(scored[static_cast<std::size_t>(i)], world.env, opt, i, tick);
      ratios[static_cast<std::size_t>(i)] = admissible_ratio(scored[static_cast<std::size_t>(i)]);
    });

    if (opt.decision_ms) {
      const std::chrono::duration<double, std::milli> spent = std::chrono::steady_clock::now() - tick_start;
      opt.decision_ms->insert(opt.decision_ms->end(), active.size(), spent.count() / static_cast<double>(active.size()));
    }

    WorldState next = world;
    next.t = world.t + 1;
    for (int i : active) {
      const auto ui = static_cast<std::size_t>(i);
      next.agents[ui] = step_agent(world.env, world.agents[ui], chosen[ui].action, &r.clamped_actions);
      ratio_sum += ratios[ui];
      ++r.decisions;
      if (!chosen[ui].admissible) ++r.fallback_decisions;
    }
    if (chasing) {
      chasing_retarget(next);
      for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const int target = world.targets[ui];
        const double d_prev = (world.agent_position(i) - world.agent_position(target)).norm();
        const double d_cur = (next.agent_position(i) - next.agent_position(target)).norm();
        r.chase_reward[ui] += chasing_reward(d_prev, d_cur);
      }
    }
    const std::vector<char> hit = check_collisions(next);
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const bool goal = check_goal(world.env, next.agents[ui], next.goals[ui]);
      const bool was_active = chasing || !world.reached[ui];
      r.agents[ui].collision.push_back(hit[ui]);
      r.agents[ui].goal.push_back(goal);
      if (was_active && opt.keep_observations)
        r.steps[ui].push_back({obs[ui], chosen[ui].action, hit[ui] != 0, tick});
      if (opt.keep_log) r.log.push_back({tick, i, next.agents[ui], was_active ? chosen[ui].action : Eigen::VectorXd(), hit[ui] != 0, goal});
      if (goal && !chasing) next.reached[ui] = 1;
    }
    world = std::move(next);
    ++r.ticks;
  }
  if (opt.keep_observations) {
    r.final_obs.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      if (!r.steps[static_cast<std::size_t>(i)].empty())
        r.final_obs[static_cast<std::size_t>(i)] = std::make_shared<const Observation>(observe(world, i));
  }
  r.admissible_ratio = r.decisions > 0 ? ratio_sum / r.decisions : 0.0;
  r.final_world = std::move(world);
  return r;
}

/// Per-agent success: reached the goal at some tick and never collided.
inline double success_rate(const EpisodeResult& r) {
  if (r.agents.empty()) return 0.0;
  double s = 0.0;
  for (const auto& a : r.agents) {
    const bool reached = std::find(a.goal.begin(), a.goal.end(), 1) != a.goal.end();
    const bool hit = std::find(a.collision.begin(), a.collision.end(), 1) != a.collision.end();
    s += (reached && !hit) ? 1.0 : 0.0;
  }
  return s / static_cast<double>(r.agents.size());
}

}  // namespace cam
