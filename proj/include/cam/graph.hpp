#pragma once

// Egocentric star graphs, their decomposition into training-sized subgraphs,
// and the Observation type fed to a CAM.

#include <algorithm>
#include <cmath>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "cam/error.hpp"
#include "cam/random.hpp"
#include "cam/worlds.hpp"

namespace cam {

inline constexpr double kNeighborRadius = 1.5;
inline constexpr int kNodeFeatureWidth = 2;

enum class NodeType : int { kAgent = 0, kObstacle = 1 };
enum class EdgeType : int { kObstacleToAgent = 0, kAgentToAgent = 1 };

struct GraphEdge {
  int src = 0;
  int dst = 0;
  EdgeType type = EdgeType::kAgentToAgent;
  std::vector<double> features;

  bool operator==(const GraphEdge&) const = default;
};

/// One agent's view: every edge points from a neighbour into the ego node.
struct EgoGraph {
  EnvKind env = EnvKind::kCar;
  std::vector<NodeType> nodes;
  std::vector<int> entity;  // agent id or obstacle id behind each node
  std::vector<GraphEdge> edges;
  int ego = 0;

  int edge_count(EdgeType t) const {
    return static_cast<int>(std::count_if(edges.begin(), edges.end(), [t](const GraphEdge& e) { return e.type == t; }));
  }
};

inline int edge_feature_width(EnvKind k) {
  switch (k) {
    case EnvKind::kCar: return 8;
    case EnvKind::kDynDubins: return 10;
    case EnvKind::kDrone: return 19;
    default: throw ContractError("edge_feature_width: " + to_string(k) + " has no graph representation");
  }
}

namespace detail {

// Per-endpoint pose features: Car [sin, cos]; DynDubins [v | sin, cos];
// Drone [vx, vy, vz, sin a, cos a, sin b, cos b].
inline std::vector<double> edge_features(EnvKind k, EdgeType type, const Eigen::VectorXd* src,
                                         const Eigen::Vector3d& src_pos, const Eigen::VectorXd& dst) {
  std::vector<double> f;
  f.reserve(static_cast<std::size_t>(edge_feature_width(k)));
  f.push_back(type == EdgeType::kObstacleToAgent ? 1.0 : 0.0);
  f.push_back(type == EdgeType::kAgentToAgent ? 1.0 : 0.0);
  const Eigen::Vector3d dst_pos = position(k, dst);
  switch (k) {
    case EnvKind::kCar:
      f.push_back(src ? std::sin((*src)[2]) : 0.0);
      f.push_back(src ? std::cos((*src)[2]) : 0.0);
      f.push_back(std::sin(dst[2]));
      f.push_back(std::cos(dst[2]));
      f.push_back(src_pos.x() - dst_pos.x());
      f.push_back(src_pos.y() - dst_pos.y());
      break;
    case EnvKind::kDynDubins:
      f.push_back(src ? (*src)[2] : 0.0);
      f.push_back(dst[2]);
      f.push_back(src ? std::sin((*src)[3]) : 0.0);
      f.push_back(src ? std::cos((*src)[3]) : 0.0);
      f.push_back(std::sin(dst[3]));
      f.push_back(std::cos(dst[3]));
      f.push_back(src_pos.x() - dst_pos.x());
      f.push_back(src_pos.y() - dst_pos.y());
      break;
    case EnvKind::kDrone: {
      auto pose = [&f](const Eigen::VectorXd* s) {
        for (int i = 3; i < 6; ++i) f.push_back(s ? (*s)[i] : 0.0);
        f.push_back(s ? std::sin((*s)[6]) : 0.0);
        f.push_back(s ? std::cos((*s)[6]) : 0.0);
        f.push_back(s ? std::sin((*s)[7]) : 0.0);
        f.push_back(s ? std::cos((*s)[7]) : 0.0);
      };
      pose(src);
      pose(&dst);
      f.push_back(src_pos.x() - dst_pos.x());
      f.push_back(src_pos.y() - dst_pos.y());
      f.push_back(src ? src_pos.z() - dst_pos.z() : 0.0);
      break;
    }
    default:
      throw ContractError("build_ego_graph: unknown environment kind");
  }
  return f;
}

}  // namespace detail

/// Star graph for `agent`: the ego node plus every agent and obstacle closer
/// than `radius`. Drones measure agents in 3D and cylinders horizontally.
inline EgoGraph build_ego_graph(const WorldState& w, int agent, double radius = kNeighborRadius) {
  if (!is_graph_env(w.env)) throw ContractError("build_ego_graph: " + to_string(w.env) + " has no graph form");
  if (agent < 0 || agent >= w.agent_count()) throw ContractError("build_ego_graph: agent id out of range");
  if (!(radius > 0.0)) throw ContractError("build_ego_graph: radius must be positive");

  const Eigen::VectorXd& self = w.agents[static_cast<std::size_t>(agent)];
  const Eigen::Vector3d self_pos = w.agent_position(agent);
  EgoGraph g;
  g.env = w.env;
  g.ego = 0;
  g.nodes.push_back(NodeType::kAgent);
  g.entity.push_back(agent);

  for (int j = 0; j < w.agent_count(); ++j) {
    if (j == agent) continue;
    const Eigen::Vector3d p = w.agent_position(j);
    if ((p - self_pos).norm() >= radius) continue;
    const int node = static_cast<int>(g.nodes.size());
    g.nodes.push_back(NodeType::kAgent);
    g.entity.push_back(j);
    g.edges.push_back({node, g.ego, EdgeType::kAgentToAgent,
                       detail::edge_features(w.env, EdgeType::kAgentToAgent, &w.agents[static_cast<std::size_t>(j)], p, self)});
  }
  for (int o = 0; o < static_cast<int>(w.obstacles.size()); ++o) {
    const Eigen::Vector2d& c = w.obstacles[static_cast<std::size_t>(o)];
    if (planar_distance(self_pos, c) >= radius) continue;
    const int node = static_cast<int>(g.nodes.size());
    g.nodes.push_back(NodeType::kObstacle);
    g.entity.push_back(o);
    g.edges.push_back({node, g.ego, EdgeType::kObstacleToAgent,
                       detail::edge_features(w.env, EdgeType::kObstacleToAgent, nullptr,
                                             Eigen::Vector3d(c.x(), c.y(), 0.0), self)});
  }
  return g;
}

/// Largest edge counts per type seen during training.
struct SubgraphCaps {
  int max_agent_edges = 2;
  int max_obstacle_edges = 9;
};

inline bool within_caps(const EgoGraph& g, const SubgraphCaps& caps) {
  return g.edge_count(EdgeType::kAgentToAgent) <= caps.max_agent_edges &&
         g.edge_count(EdgeType::kObstacleToAgent) <= caps.max_obstacle_edges;
}

namespace detail {

inline EgoGraph subgraph(const EgoGraph& g, const std::vector<int>& edge_ids) {
  EgoGraph s;
  s.env = g.env;
  s.ego = 0;
  s.nodes.push_back(g.nodes[static_cast<std::size_t>(g.ego)]);
  s.entity.push_back(g.entity[static_cast<std::size_t>(g.ego)]);
  for (int id : edge_ids) {
    const GraphEdge& e = g.edges[static_cast<std::size_t>(id)];
    const int node = static_cast<int>(s.nodes.size());
    s.nodes.push_back(g.nodes[static_cast<std::size_t>(e.src)]);
    s.entity.push_back(g.entity[static_cast<std::size_t>(e.src)]);
    s.edges.push_back({node, 0, e.type, e.features});
  }
  return s;
}

}  // namespace detail

/// Splits `g` into subgraphs that respect `caps` and together cover every
/// edge. Edges of each type are shuffled, packed into chunks of at most the
/// cap, and agent chunks are paired with obstacle chunks round-robin. A graph
/// already within caps comes back unchanged as the only subgraph.
inline std::vector<EgoGraph> decompose(const EgoGraph& g, const SubgraphCaps& caps, Rng& rng) {
  if (caps.max_agent_edges < 0 || caps.max_obstacle_edges < 0) throw ContractError("decompose: caps must be >= 0");
  if (within_caps(g, caps)) return {g};

  std::vector<int> agent_edges, obstacle_edges;
  for (int i = 0; i < static_cast<int>(g.edges.size()); ++i)
    (g.edges[static_cast<std::size_t>(i)].type == EdgeType::kAgentToAgent ? agent_edges : obstacle_edges).push_back(i);
  if ((!agent_edges.empty() && caps.max_agent_edges == 0) || (!obstacle_edges.empty() && caps.max_obstacle_edges == 0))
    throw ContractError("decompose: a zero cap cannot cover edges of that type");
  std::shuffle(agent_edges.begin(), agent_edges.end(), rng);
  std::shuffle(obstacle_edges.begin(), obstacle_edges.end(), rng);

  auto chunk = [](const std::vector<int>& ids, int cap) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(cap))
      out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                       ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + static_cast<std::size_t>(cap))));
    return out;
  };
  const auto agent_chunks = chunk(agent_edges, std::max(1, caps.max_agent_edges));
  const auto obstacle_chunks = chunk(obstacle_edges, std::max(1, caps.max_obstacle_edges));
  const std::size_t count = std::max({agent_chunks.size(), obstacle_chunks.size(), std::size_t{1}});

  std::vector<EgoGraph> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> ids;
    if (!agent_chunks.empty()) {
      const auto& c = agent_chunks[i % agent_chunks.size()];
      ids.insert(ids.end(), c.begin(), c.end());
    }
    if (!obstacle_chunks.empty()) {
      const auto& c = obstacle_chunks[i % obstacle_chunks.size()];
      ids.insert(ids.end(), c.begin(), c.end());
    }
    out.push_back(detail::subgraph(g, ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Observations

/// Flat state features for the MLP-backed single-agent environments.
struct RawState {
  Eigen::VectorXd x;
};

using Observation = std::variant<RawState, EgoGraph>;

inline int raw_feature_width(EnvKind k) {
  switch (k) {
    case EnvKind::kIntegrator: return 2;
    case EnvKind::kDubinsSingle: return 5;
    default: throw ContractError("raw_feature_width: " + to_string(k) + " uses graph observations");
  }
}

inline RawState raw_state(EnvKind k, const Eigen::VectorXd& s) {
  if (k == EnvKind::kIntegrator) return {s};
  if (k == EnvKind::kDubinsSingle) {
    Eigen::VectorXd x(5);
    x << s[0], s[1], s[2], std::sin(s[3]), std::cos(s[3]);
    return {x};
  }
  throw ContractError("raw_state: " + to_string(k) + " uses graph observations");
}

inline Observation observe(const WorldState& w, int agent, double radius = kNeighborRadius) {
  if (is_graph_env(w.env)) return build_ego_graph(w, agent, radius);
  return raw_state(w.env, w.agents[static_cast<std::size_t>(agent)]);
}

}  // namespace cam
