#pragma once

// Environment dynamics, collision/goal predicates, task generation,
// preference functions, the drone LQR reference controller and the chasing
// game helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cam/error.hpp"
#include "cam/random.hpp"

namespace cam {

enum class EnvKind {
  kCar,
  kDynDubins,
  kDrone,
  kIntegrator,    // single-agent 2D single integrator with rectangular danger regions
  kDubinsSingle,  // single-agent dynamic Dubins with rectangular danger regions
};

inline std::string to_string(EnvKind k) {
  switch (k) {
    case EnvKind::kCar: return "car";
    case EnvKind::kDynDubins: return "dyn_dubins";
    case EnvKind::kDrone: return "drone";
    case EnvKind::kIntegrator: return "integrator";
    case EnvKind::kDubinsSingle: return "dubins_single";
  }
  return "unknown";
}

inline EnvKind env_from_string(std::string_view s) {
  if (s == "car") return EnvKind::kCar;
  if (s == "dyn_dubins") return EnvKind::kDynDubins;
  if (s == "drone") return EnvKind::kDrone;
  if (s == "integrator") return EnvKind::kIntegrator;
  if (s == "dubins_single") return EnvKind::kDubinsSingle;
  throw ContractError("unknown environment kind '" + std::string(s) + "'");
}

inline constexpr double kAgentRadius = 0.15;
inline constexpr double kObstacleRadius = 0.15;
inline constexpr double kCollisionDistance = 0.3;
inline constexpr double kGoalDistance = 0.45;
inline constexpr double kSingleAgentGoalDistance = 0.3;
inline constexpr double kPlacementClearance = 0.31;
inline constexpr double kGravity = 9.8;
inline constexpr double kCarSpeed = 0.05;
inline constexpr double kCarDt = 1.0;
inline constexpr double kDubinsDt = 0.05;
inline constexpr double kIntegratorDt = 0.05;
inline constexpr double kDroneDt = 0.01;
inline constexpr int kDroneSubsteps = 10;
inline constexpr int kMaxPlacementAttempts = 10000;

inline bool is_graph_env(EnvKind k) { return k == EnvKind::kCar || k == EnvKind::kDynDubins || k == EnvKind::kDrone; }

inline int state_dim(EnvKind k) {
  switch (k) {
    case EnvKind::kCar: return 3;
    case EnvKind::kDynDubins:
    case EnvKind::kDubinsSingle: return 4;
    case EnvKind::kDrone: return 9;
    case EnvKind::kIntegrator: return 2;
  }
  return 0;
}

inline int action_dim(EnvKind k) {
  switch (k) {
    case EnvKind::kCar: return 1;
    case EnvKind::kDynDubins:
    case EnvKind::kDubinsSingle:
    case EnvKind::kIntegrator: return 2;
    case EnvKind::kDrone: return 4;
  }
  return 0;
}

struct ActionBox {
  Eigen::VectorXd low;
  Eigen::VectorXd high;

  Eigen::VectorXd clamp(const Eigen::VectorXd& a) const { return a.cwiseMax(low).cwiseMin(high); }
  bool contains(const Eigen::VectorXd& a) const {
    return ((a - low).array() >= 0.0).all() && ((high - a).array() >= 0.0).all();
  }
  Eigen::VectorXd half_width() const { return 0.5 * (high - low); }
};

inline ActionBox action_box(EnvKind k) {
  const int d = action_dim(k);
  if (k == EnvKind::kCar) {
    const double w = 2.0 / 3.0 * std::numbers::pi;
    return {Eigen::VectorXd::Constant(1, -w), Eigen::VectorXd::Constant(1, w)};
  }
  return {Eigen::VectorXd::Constant(d, -1.0), Eigen::VectorXd::Constant(d, 1.0)};
}

inline int default_horizon(EnvKind k) {
  switch (k) {
    case EnvKind::kCar:
    case EnvKind::kIntegrator: return 128;
    case EnvKind::kDynDubins:
    case EnvKind::kDubinsSingle:
    case EnvKind::kDrone: return 256;
  }
  return 128;
}

inline double wrap_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(theta, two_pi);
  if (w < 0.0) w += two_pi;
  if (w >= two_pi) w -= two_pi;
  return w;
}

/// Agent position with z = 0 for planar environments.
inline Eigen::Vector3d position(EnvKind k, const Eigen::VectorXd& s) {
  if (k == EnvKind::kDrone) return {s[0], s[1], s[2]};
  return {s[0], s[1], 0.0};
}

// ---------------------------------------------------------------------------
// Steppers. These integrate the vector fields for an in-box action; use
// step_agent to apply the action box first.

inline Eigen::VectorXd step_car(const Eigen::VectorXd& s, double theta_dot, double dt = kCarDt) {
  const double heading = s[2] + theta_dot * dt;
  Eigen::VectorXd n(3);
  n << s[0] + kCarSpeed * std::sin(heading), s[1] + kCarSpeed * std::cos(heading), wrap_angle(heading);
  return n;
}

/// State [p_x, p_y, v, theta], action [q, theta_dot]. Position advances by
/// v * dt along the post-turn heading; v is clamped to [0, 1] afterwards.
inline Eigen::VectorXd step_dyn_dubins(const Eigen::VectorXd& s, const Eigen::VectorXd& a, double dt = kDubinsDt) {
  const double heading = s[3] + a[1] * dt;
  Eigen::VectorXd n(4);
  n << s[0] + s[2] * dt * std::sin(heading), s[1] + s[2] * dt * std::cos(heading),
      std::clamp(s[2] + a[0] * dt, 0.0, 1.0), wrap_angle(heading);
  return n;
}

/// State [p(3), v(3), alpha, beta, gamma], action [q, alpha_dot, beta_dot,
/// gamma_dot]. `substeps` explicit Euler steps of the quadrotor field, then
/// velocities are clamped to [-1, 1] and angles to [-pi/2, pi/2].
inline Eigen::VectorXd step_drone(const Eigen::VectorXd& s, const Eigen::VectorXd& a, double dt = kDroneDt,
                                  int substeps = kDroneSubsteps) {
  Eigen::VectorXd x = s;
  const double q = a[0];
  for (int i = 0; i < substeps; ++i) {
    const double alpha = x[6];
    const double beta = x[7];
    Eigen::VectorXd d(9);
    d << x[3], x[4], x[5], -std::sin(beta) * q, std::cos(beta) * std::sin(alpha) * q,
        std::cos(beta) * std::cos(alpha) * q - kGravity, a[1], a[2], a[3];
    x += d * dt;
  }
  constexpr double half_pi = std::numbers::pi / 2.0;
  for (int i = 3; i < 6; ++i) x[i] = std::clamp(x[i], -1.0, 1.0);
  for (int i = 6; i < 9; ++i) x[i] = std::clamp(x[i], -half_pi, half_pi);
  return x;
}

inline Eigen::VectorXd step_integrator(const Eigen::VectorXd& s, const Eigen::VectorXd& a, double dt = kIntegratorDt) {
  return s + a * dt;
}

/// Clamps the action into the environment's box (counting clamps when
/// `clamped` is given) and advances one control step.
inline Eigen::VectorXd step_agent(EnvKind k, const Eigen::VectorXd& s, const Eigen::VectorXd& action,
                                  int* clamped = nullptr) {
  const ActionBox box = action_box(k);
  if (action.size() != box.low.size()) throw ShapeError("step_agent: action has wrong dimension");
  Eigen::VectorXd a = action;
  if (!box.contains(a)) {
    a = box.clamp(a);
    if (clamped) ++*clamped;
  }
  switch (k) {
    case EnvKind::kCar: return step_car(s, a[0]);
    case EnvKind::kDynDubins:
    case EnvKind::kDubinsSingle: return step_dyn_dubins(s, a);
    case EnvKind::kDrone: return step_drone(s, a);
    case EnvKind::kIntegrator: return step_integrator(s, a);
  }
  throw ContractError("step_agent: unknown environment");
}

// ---------------------------------------------------------------------------
// World state and tasks

/// Axis-aligned rectangular danger region.
struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double distance(double x, double y) const {
    const double dx = std::max({x0 - x, 0.0, x - x1});
    const double dy = std::max({y0 - y, 0.0, y - y1});
    return std::hypot(dx, dy);
  }
};

/// Fixed layout for the single-agent environments.
struct SingleAgentLayout {
  Eigen::Vector2d start{0.0, -1.7};
  double start_x_jitter = 0.0;  // start p_x drawn from start.x +- jitter
  double start_heading = 0.0;  // heading 0 faces +y, toward the default goal
  Eigen::Vector2d goal{0.0, 1.7};
  std::vector<Rect> regions{{-3.0, -0.25, -0.3, 0.25}, {0.3, -0.25, 1.2, 0.25}, {1.6, -0.25, 3.0, 0.25}};
};

enum class TaskMode { kNavigation, kChasing };

struct TaskSpec {
  EnvKind env = EnvKind::kCar;
  int agents = 3;
  int obstacles = 3;
  double map_side = 3.0;
  std::uint64_t seed = 0;
  TaskMode mode = TaskMode::kNavigation;
  int horizon = 128;
  SingleAgentLayout layout;
};

struct WorldState {
  EnvKind env = EnvKind::kCar;
  std::vector<Eigen::VectorXd> agents;
  std::vector<Eigen::Vector3d> goals;
  std::vector<Eigen::Vector2d> obstacles;  // circle or infinite-cylinder centres
  std::vector<Rect> regions;
  double map_side = 3.0;
  int t = 0;
  std::vector<char> reached;
  std::vector<int> targets;  // chasing: fixed target per agent; empty when navigating

  int agent_count() const { return static_cast<int>(agents.size()); }
  Eigen::Vector3d agent_position(int i) const { return position(env, agents[static_cast<std::size_t>(i)]); }
};

inline double planar_distance(const Eigen::Vector3d& a, const Eigen::Vector2d& b) {
  return std::hypot(a.x() - b.x(), a.y() - b.y());
}

/// Per-agent collision flags. Agents collide below 0.3 centre distance to any
/// other agent or obstacle (drones: 3D to agents, horizontal to cylinders),
/// or when intersecting a danger rectangle.
inline std::vector<char> check_collisions(const WorldState& w) {
  const int n = w.agent_count();
  std::vector<char> hit(static_cast<std::size_t>(n), 0);
  std::vector<Eigen::Vector3d> pos(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = w.agent_position(i);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if ((pos[static_cast<std::size_t>(i)] - pos[static_cast<std::size_t>(j)]).norm() < kCollisionDistance) {
        hit[static_cast<std::size_t>(i)] = 1;
        hit[static_cast<std::size_t>(j)] = 1;
      }
    }
    for (const auto& o : w.obstacles)
      if (planar_distance(pos[static_cast<std::size_t>(i)], o) < kCollisionDistance) hit[static_cast<std::size_t>(i)] = 1;
    for (const auto& r : w.regions)
      if (r.distance(pos[static_cast<std::size_t>(i)].x(), pos[static_cast<std::size_t>(i)].y()) < kAgentRadius)
        hit[static_cast<std::size_t>(i)] = 1;
  }
  return hit;
}

inline bool check_goal(EnvKind k, const Eigen::VectorXd& state, const Eigen::Vector3d& goal) {
  const double d = (position(k, state) - goal).norm();
  if (k == EnvKind::kIntegrator || k == EnvKind::kDubinsSingle) return d < kSingleAgentGoalDistance;
  return d < kGoalDistance;
}

/// Random derangement by rejection: shuffle until no agent targets itself.
inline std::vector<int> sample_derangement(int n, Rng& rng) {
  if (n == 1) throw ContractError("chasing mode needs at least two agents");
  std::vector<int> p(static_cast<std::size_t>(n));
  if (n == 0) return p;
  while (true) {
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    bool ok = true;
    for (int i = 0; i < n; ++i) ok = ok && p[static_cast<std::size_t>(i)] != i;
    if (ok) return p;
  }
}

/// Each agent's goal becomes its target's current position.
inline void chasing_retarget(WorldState& w) {
  for (std::size_t i = 0; i < w.targets.size(); ++i)
    w.goals[i] = w.agent_position(w.targets[i]);
}

inline double chasing_reward(double d_prev, double d_cur) { return std::clamp(d_prev - d_cur, 0.0, 2.0); }

namespace detail {

inline WorldState sample_single_agent(const TaskSpec& spec, Rng& rng) {
  WorldState w;
  w.env = spec.env;
  w.map_side = spec.map_side;
  w.regions = spec.layout.regions;
  Eigen::VectorXd s = Eigen::VectorXd::Zero(state_dim(spec.env));
  const double jitter = spec.layout.start_x_jitter;
  s[0] = jitter > 0.0 ? uniform(rng, spec.layout.start.x() - jitter, spec.layout.start.x() + jitter)
                      : spec.layout.start.x();
  s[1] = spec.layout.start.y();
  if (spec.env == EnvKind::kDubinsSingle) s[3] = wrap_angle(spec.layout.start_heading);
  w.agents.push_back(s);
  w.goals.emplace_back(spec.layout.goal.x(), spec.layout.goal.y(), 0.0);
  w.reached.assign(1, 0);
  return w;
}

}  // namespace detail

/// Places obstacles, agents and goals uniformly in the map with pairwise
/// clearance, so the world is collision-free at t = 0. Deterministic in
/// spec.seed.
inline WorldState sample_task(const TaskSpec& spec) {
  if (spec.agents < 0 || spec.obstacles < 0) throw ContractError("sample_task: counts must be non-negative");
  Rng rng = make_rng(spec.seed, {0x7a5cULL});
  if (!is_graph_env(spec.env)) {
    if (spec.agents != 1) throw ContractError("sample_task: single-agent environments take exactly one agent");
    return detail::sample_single_agent(spec, rng);
  }
  if (!(spec.map_side >= 1.0)) throw ContractError("sample_task: map side must be at least 1");
  const double L = spec.map_side;
  const bool drone = spec.env == EnvKind::kDrone;

  WorldState w;
  w.env = spec.env;
  w.map_side = L;

  auto fail = [&](const char* what) {
    throw DensityError(std::string("sample_task: could not place ") + what + " after " +
                       std::to_string(kMaxPlacementAttempts) + " attempts");
  };

  for (int i = 0; i < spec.obstacles; ++i) {
    int attempt = 0;
    for (; attempt < kMaxPlacementAttempts; ++attempt) {
      Eigen::Vector2d c(uniform(rng, 0.0, L), uniform(rng, 0.0, L));
      bool ok = true;
      for (const auto& o : w.obstacles) ok = ok && (c - o).norm() >= kPlacementClearance;
      if (ok) {
        w.obstacles.push_back(c);
        break;
      }
    }
    if (attempt == kMaxPlacementAttempts) fail("obstacles");
  }

  std::vector<Eigen::Vector3d> placed;
  for (int i = 0; i < spec.agents; ++i) {
    int attempt = 0;
    for (; attempt < kMaxPlacementAttempts; ++attempt) {
      Eigen::Vector3d p(uniform(rng, 0.0, L), uniform(rng, 0.0, L), drone ? uniform(rng, 0.0, L) : 0.0);
      bool ok = true;
      for (const auto& q : placed) ok = ok && (p - q).norm() >= kPlacementClearance;
      for (const auto& o : w.obstacles) ok = ok && planar_distance(p, o) >= kPlacementClearance;
      if (ok) {
        placed.push_back(p);
        break;
      }
    }
    if (attempt == kMaxPlacementAttempts) fail("agents");
  }

  for (int i = 0; i < spec.agents; ++i) {
    int attempt = 0;
    for (; attempt < kMaxPlacementAttempts; ++attempt) {
      Eigen::Vector3d g(uniform(rng, 0.0, L), uniform(rng, 0.0, L), drone ? uniform(rng, 0.0, L) : 0.0);
      bool ok = true;
      for (const auto& q : w.goals) ok = ok && (g - q).norm() >= kPlacementClearance;
      for (const auto& o : w.obstacles) ok = ok && planar_distance(g, o) >= kPlacementClearance;
      if (ok) {
        w.goals.push_back(g);
        break;
      }
    }
    if (attempt == kMaxPlacementAttempts) fail("goals");
  }

  for (const auto& p : placed) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(state_dim(spec.env));
    s[0] = p.x();
    s[1] = p.y();
    switch (spec.env) {
      case EnvKind::kCar: s[2] = uniform(rng, 0.0, 2.0 * std::numbers::pi); break;
      case EnvKind::kDynDubins: s[3] = uniform(rng, 0.0, 2.0 * std::numbers::pi); break;
      case EnvKind::kDrone: s[2] = p.z(); break;
      default: break;
    }
    w.agents.push_back(s);
  }
  w.reached.assign(static_cast<std::size_t>(spec.agents), 0);

  if (spec.mode == TaskMode::kChasing) {
    w.targets = sample_derangement(spec.agents, rng);
    chasing_retarget(w);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Preferences

/// Negative squared distance from the post-step position to the goal.
inline double preference_l2(EnvKind k, const Eigen::VectorXd& state, const Eigen::Vector3d& goal,
                            const Eigen::VectorXd& action) {
  return -(position(k, step_agent(k, state, action)) - goal).squaredNorm();
}

inline double preference_l2(const WorldState& w, int agent, const Eigen::Vector3d& goal, const Eigen::VectorXd& action) {
  return preference_l2(w.env, w.agents[static_cast<std::size_t>(agent)], goal, action);
}

/// Discrete-time LQR gain by fixed-point iteration of the Riccati recurrence.
/// Stops when successive P differ by less than `tol` in max-norm.
inline Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
                                const Eigen::MatrixXd& R, double tol = 1e-9, int max_iter = 10000) {
  if (A.rows() != A.cols() || B.rows() != A.rows() || Q.rows() != A.rows() || R.rows() != B.cols())
    throw ShapeError("lqr_gain: inconsistent A, B, Q, R shapes");
  Eigen::MatrixXd P = Q;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd BtP = B.transpose() * P;
    const Eigen::MatrixXd K = (R + BtP * B).ldlt().solve(BtP * A);
    Eigen::MatrixXd next = Q + A.transpose() * P * (A - B * K);
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw NumericError("lqr_gain: Riccati iteration diverged");
    const double delta = (next - P).cwiseAbs().maxCoeff();
    P = std::move(next);
    if (delta < tol) {
      const Eigen::MatrixXd BtPc = B.transpose() * P;
      return (R + BtPc * B).ldlt().solve(BtPc * A);
    }
  }
  throw NumericError("lqr_gain: Riccati iteration did not converge");
}

/// Euler discretisation (step dt * k) of the drone field linearised at hover.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> drone_linearization(double step = kDroneDt * kDroneSubsteps) {
  Eigen::MatrixXd Ac = Eigen::MatrixXd::Zero(9, 9);
  Eigen::MatrixXd Bc = Eigen::MatrixXd::Zero(9, 4);
  for (int i = 0; i < 3; ++i) Ac(i, 3 + i) = 1.0;
  Ac(3, 7) = -kGravity;  // dv_x/dbeta = -cos(beta) q
  Ac(4, 6) = kGravity;   // dv_y/dalpha = cos(beta) cos(alpha) q
  Bc(5, 0) = 1.0;        // dv_z/dq
  Bc(6, 1) = 1.0;
  Bc(7, 2) = 1.0;
  Bc(8, 3) = 1.0;
  return {Eigen::MatrixXd::Identity(9, 9) + step * Ac, step * Bc};
}

inline Eigen::MatrixXd drone_lqr_gain() {
  auto [A, B] = drone_linearization();
  return lqr_gain(A, B, Eigen::MatrixXd::Identity(9, 9), Eigen::MatrixXd::Identity(4, 4));
}

/// Reference action: -K (x - x_goal) plus hover thrust, clamped to the box.
inline Eigen::VectorXd drone_lqr_action(const Eigen::VectorXd& state, const Eigen::Vector3d& goal,
                                        const Eigen::MatrixXd& gain) {
  Eigen::VectorXd target = Eigen::VectorXd::Zero(9);
  target.head<3>() = goal;
  Eigen::VectorXd u = -gain * (state - target);
  u[0] += kGravity;
  return action_box(EnvKind::kDrone).clamp(u);
}

inline double preference_lqr_drone(const Eigen::VectorXd& state, const Eigen::Vector3d& goal,
                                   const Eigen::VectorXd& action, const Eigen::MatrixXd& gain) {
  return -(drone_lqr_action(state, goal, gain) - action).squaredNorm();
}

}  // namespace cam
