#pragma once

// Greedy deployment with optional graph decomposition, plus the metrics and
// analyses built on top of it.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cam/cam_core.hpp"
#include "cam/error.hpp"
#include "cam/rollout.hpp"
#include "cam/worlds.hpp"

namespace cam {

/// Mean over agents of the fraction of collision-free ticks.
inline double safety_rate(std::span<const AgentTrajectory> agents) {
  if (agents.empty()) return 1.0;
  double total = 0.0;
  for (const auto& a : agents) {
    if (a.collision.empty()) {
      total += 1.0;
      continue;
    }
    const auto hits = std::count(a.collision.begin(), a.collision.end(), 1);
    total += 1.0 - static_cast<double>(hits) / static_cast<double>(a.collision.size());
  }
  return total / static_cast<double>(agents.size());
}

/// Per agent: -0.1 per tick until the goal is first reached (every tick if it
/// never is), -1 per collision tick, +10 once for reaching the goal. Averaged
/// over agents.
inline double episode_reward(std::span<const AgentTrajectory> agents) {
  if (agents.empty()) return 0.0;
  double total = 0.0;
  for (const auto& a : agents) {
    const auto first_goal = std::find(a.goal.begin(), a.goal.end(), 1);
    const bool reached = first_goal != a.goal.end();
    const auto ticks = reached ? (first_goal - a.goal.begin()) + 1 : static_cast<std::ptrdiff_t>(a.goal.size());
    const auto hits = std::count(a.collision.begin(), a.collision.end(), 1);
    total += (reached ? 10.0 : 0.0) - static_cast<double>(hits) - 0.1 * static_cast<double>(ticks);
  }
  return total / static_cast<double>(agents.size());
}

struct Metrics {
  double safety_rate = 0.0;
  double reward = 0.0;
  double success_rate = 0.0;
  double decision_ms_mean = 0.0;
  double decision_ms_max = 0.0;
  int tasks = 0;
  std::vector<std::uint64_t> seeds;
};

struct EvalOptions {
  int candidates = 2000;
  bool decompose = true;
  SubgraphCaps caps;
  int horizon = 0;  // 0 uses each task's own horizon
  int adaptive_chunk = 0;
  bool keep_log = false;
  std::uint64_t seed = 0;
};

struct EvalResult {
  Metrics metrics;
  std::vector<std::vector<LogRecord>> logs;  // per task, when kept
  std::vector<EpisodeResult> episodes;
};

namespace detail {

inline RolloutOptions rollout_options(const EvalOptions& o, std::uint64_t task_seed) {
  RolloutOptions r;
  r.candidates = o.candidates;
  r.decompose = o.decompose;
  r.caps = o.caps;
  r.adaptive_chunk = o.adaptive_chunk;
  r.keep_log = o.keep_log;
  r.seed = derive_seed(o.seed, {0xe7a1ULL, task_seed});
  return r;
}

}  // namespace detail

/// Noise-free rollouts over `tasks`; metrics are means of per-task values.
inline EvalResult evaluate(const CamModel& model, std::span<const TaskSpec> tasks, const EvalOptions& opt) {
  if (tasks.empty()) throw ContractError("evaluate: need at least one task");
  EvalResult res;
  double safety = 0.0, reward = 0.0, success = 0.0;
  std::vector<double> ms;
  for (const TaskSpec& spec : tasks) {
    if (spec.env != model.env())
      throw ContractError("evaluate: model is for " + to_string(model.env()) + " but the task is " + to_string(spec.env));
    const WorldState w = sample_task(spec);
    RolloutOptions ro = detail::rollout_options(opt, spec.seed);
    ro.decision_ms = &ms;
    EpisodeResult ep = run_episode(model, w, opt.horizon > 0 ? opt.horizon : spec.horizon, ro);
    safety += safety_rate(ep.agents);
    if (!ep.chase_reward.empty()) {
      double s = 0.0;
      for (double r : ep.chase_reward) s += r;
      reward += s / static_cast<double>(ep.chase_reward.size());
    } else {
      reward += episode_reward(ep.agents);
    }
    success += success_rate(ep);
    res.metrics.seeds.push_back(spec.seed);
    if (opt.keep_log) res.logs.push_back(std::move(ep.log));
    ep.log.clear();
    res.episodes.push_back(std::move(ep));
  }
  const double n = static_cast<double>(tasks.size());
  res.metrics.tasks = static_cast<int>(tasks.size());
  res.metrics.safety_rate = safety / n;
  res.metrics.reward = reward / n;
  res.metrics.success_rate = success / n;
  if (!ms.empty()) {
    double sum = 0.0;
    for (double x : ms) sum += x;
    res.metrics.decision_ms_mean = sum / static_cast<double>(ms.size());
    res.metrics.decision_ms_max = *std::max_element(ms.begin(), ms.end());
  }
  return res;
}

/// `count` tasks derived from `base` with seeds base.seed, base.seed+1, ...
inline std::vector<TaskSpec> seeded_tasks(const TaskSpec& base, int count) {
  std::vector<TaskSpec> out;
  for (int i = 0; i < count; ++i) {
    TaskSpec s = base;
    s.seed = base.seed + static_cast<std::uint64_t>(i);
    out.push_back(s);
  }
  return out;
}

/// Zero-shot chasing: reward is the per-agent sum of clipped distance
/// improvements toward the assigned target, averaged over agents and tasks.
inline Metrics run_chasing(const CamModel& model, const TaskSpec& base, int count, const EvalOptions& opt) {
  if (base.agents < 2) throw ContractError("run_chasing: need at least two agents");
  TaskSpec spec = base;
  spec.mode = TaskMode::kChasing;
  const auto tasks = seeded_tasks(spec, count);
  return evaluate(model, tasks, opt).metrics;
}

struct SweepRow {
  int agents = 0;
  int obstacles = 0;
  Metrics metrics;
};

/// Evaluates every (agents, obstacles) cell on the same task seeds.
inline std::vector<SweepRow> density_sweep(const CamModel& model, const TaskSpec& base, std::span<const int> agent_counts,
                                           std::span<const int> obstacle_counts, int tasks_per_cell,
                                           const EvalOptions& opt) {
  std::vector<SweepRow> rows;
  for (int a : agent_counts)
    for (int o : obstacle_counts) {
      TaskSpec spec = base;
      spec.agents = a;
      spec.obstacles = o;
      const auto tasks = seeded_tasks(spec, tasks_per_cell);
      rows.push_back({a, o, evaluate(model, tasks, opt).metrics});
    }
  return rows;
}

inline void write_metrics_header(std::ostream& os) {
  os << "agents,obstacles,tasks,safety_rate,reward,success_rate\n";
}

inline void write_metrics_row(std::ostream& os, int agents, int obstacles, const Metrics& m) {
  os.precision(17);
  os << agents << ',' << obstacles << ',' << m.tasks << ',' << m.safety_rate << ',' << m.reward << ','
     << m.success_rate << '\n';
}

// ---------------------------------------------------------------------------
// Forward-invariance analysis

enum class Region { kAdmissible, kBoundary, kInadmissible };

struct InvarianceReport {
  std::vector<std::vector<Region>> regions;     // per path, per visited state
  std::vector<std::vector<char>> violations;    // per path, per visited state
  int states = 0;
  double admissible_fraction = 0.0;
  double boundary_fraction = 0.0;
  double inadmissible_fraction = 0.0;
  double violation_fraction = 0.0;           // violations over all visited states
  double boundary_violation_fraction = 0.0;  // violations over boundary states
};

/// Classifies every visited state by probing `n_probe` uniform actions, and
/// flags boundary states whose successor lies in the inadmissible region.
template <AdmissibilityScorer Scorer>
InvarianceReport invariance_analysis(const Scorer& model, EnvKind env,
                                     std::span<const std::vector<Observation>> paths, int n_probe, Rng& rng) {
  if (n_probe < 1) throw ContractError("invariance_analysis: n_probe must be >= 1");
  const ActionBox box = action_box(env);
  InvarianceReport rep;
  int adm = 0, bnd = 0, inadm = 0, viol = 0;
  for (const auto& path : paths) {
    std::vector<Region> regions;
    for (const Observation& o : path) {
      const Eigen::VectorXd phi = model.score_batch(o, sample_box(rng, n_probe, box.low, box.high));
      const bool all_pos = (phi.array() >= 0.0).all();
      const bool all_neg = (phi.array() < 0.0).all();
      const Region r = all_pos ? Region::kAdmissible : (all_neg ? Region::kInadmissible : Region::kBoundary);
      regions.push_back(r);
      adm += r == Region::kAdmissible;
      bnd += r == Region::kBoundary;
      inadm += r == Region::kInadmissible;
    }
    std::vector<char> flags(regions.size(), 0);
    for (std::size_t t = 0; t + 1 < regions.size(); ++t)
      if (regions[t] == Region::kBoundary && regions[t + 1] == Region::kInadmissible) {
        flags[t] = 1;
        ++viol;
      }
    rep.states += static_cast<int>(regions.size());
    rep.regions.push_back(std::move(regions));
    rep.violations.push_back(std::move(flags));
  }
  if (rep.states > 0) {
    const double n = rep.states;
    rep.admissible_fraction = adm / n;
    rep.boundary_fraction = bnd / n;
    rep.inadmissible_fraction = inadm / n;
    rep.violation_fraction = viol / n;
  }
  rep.boundary_violation_fraction = bnd > 0 ? static_cast<double>(viol) / bnd : 0.0;
  return rep;
}

/// Visited observations of every agent, final state included. The episode
/// must have been run with keep_observations.
inline std::vector<std::vector<Observation>> visited_paths(const EpisodeResult& ep) {
  std::vector<std::vector<Observation>> paths;
  for (std::size_t i = 0; i < ep.steps.size(); ++i) {
    std::vector<Observation> path;
    for (const AgentStep& s : ep.steps[i]) path.push_back(*s.obs);
    if (i < ep.final_obs.size() && ep.final_obs[i]) path.push_back(*ep.final_obs[i]);
    paths.push_back(std::move(path));
  }
  return paths;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingStats {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
  double max_ms = 0.0;
  std::size_t samples = 0;
};

inline TimingStats summarize_timing(std::vector<double> ms) {
  TimingStats s;
  s.samples = ms.size();
  if (ms.empty()) return s;
  double sum = 0.0;
  for (double x : ms) sum += x;
  s.mean_ms = sum / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const std::size_t k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size()))) - 1;
  s.p95_ms = ms[std::min(k, ms.size() - 1)];
  s.max_ms = ms.back();
  return s;
}

/// Wall-clock milliseconds per agent decision: each tick's observe, score
/// and select phase divided by the number of deciding agents.
inline TimingStats decision_timing(const CamModel& model, std::span<const TaskSpec> tasks, const EvalOptions& opt) {
  std::vector<double> samples;
  for (const TaskSpec& spec : tasks) {
    const WorldState w = sample_task(spec);
    RolloutOptions ro = detail::rollout_options(opt, spec.seed);
    ro.decision_ms = &samples;
    run_episode(model, w, opt.horizon > 0 ? opt.horizon : spec.horizon, ro);
  }
  return summarize_timing(std::move(samples));
}

// ---------------------------------------------------------------------------
// Landscape export

struct LandscapeRow {
  double a_i = 0.0;
  double a_j = 0.0;
  double phi = 0.0;
};

/// phi over a resolution x resolution grid spanning the action box along
/// dimensions `dim_i` and `dim_j`; other dimensions take `fixed`. Only a
/// one-dimensional action space may pass the same dimension twice.
inline std::vector<LandscapeRow> export_landscape(const CamModel& model, const Observation& obs, int dim_i, int dim_j,
                                                  int resolution, const Eigen::VectorXd& fixed) {
  const int d = model.action_width();
  if (dim_i < 0 || dim_i >= d || dim_j < 0 || dim_j >= d || (d > 1 && dim_i == dim_j))
    throw ContractError("export_landscape: invalid action dimensions");
  if (resolution < 2) throw ContractError("export_landscape: resolution must be >= 2");
  if (fixed.size() != d) throw ShapeError("export_landscape: fixed action has the wrong width");
  const ActionBox box = action_box(model.env());
  auto grid = [&](int dim, int k) {
    return box.low[dim] + (box.high[dim] - box.low[dim]) * static_cast<double>(k) / static_cast<double>(resolution - 1);
  };
  // A one-dimensional box (dim_i == dim_j) gives a line instead of a square.
  const int inner = dim_i == dim_j ? 1 : resolution;
  Matrix actions(static_cast<Eigen::Index>(resolution) * inner, d);
  Eigen::Index row = 0;
  for (int a = 0; a < resolution; ++a)
    for (int b = 0; b < inner; ++b, ++row) {
      actions.row(row) = fixed.transpose();
      actions(row, dim_i) = grid(dim_i, a);
      if (dim_j != dim_i) actions(row, dim_j) = grid(dim_j, b);
    }
  const Eigen::VectorXd phi = model.score_batch(obs, actions);
  std::vector<LandscapeRow> out;
  out.reserve(static_cast<std::size_t>(actions.rows()));
  for (Eigen::Index r = 0; r < actions.rows(); ++r) out.push_back({actions(r, dim_i), actions(r, dim_j), phi[r]});
  return out;
}

inline void write_landscape(std::ostream& os, std::span<const LandscapeRow> rows) {
  os.precision(17);
  os << "a_i,a_j,phi\n";
  for (const auto& r : rows) os << r.a_i << ',' << r.a_j << ',' << r.phi << '\n';
}

}  // namespace cam
