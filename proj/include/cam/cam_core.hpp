#pragma once

// The control admissibility model: MLP and GNN backbones, batched scoring of
// candidate actions, min-composition over decomposed subgraphs, and action
// selection from the admissible set.

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "cam/diffcore.hpp"
#include "cam/error.hpp"
#include "cam/graph.hpp"
#include "cam/random.hpp"
#include "cam/worlds.hpp"

namespace cam {

using diff::Matrix;

enum class Backbone { kMlp, kGnn };

inline std::string to_string(Backbone b) { return b == Backbone::kMlp ? "mlp" : "gnn"; }
inline Backbone backbone_from_string(std::string_view s) {
  if (s == "mlp") return Backbone::kMlp;
  if (s == "gnn") return Backbone::kGnn;
  throw ContractError("unknown backbone '" + std::string(s) + "'");
}

struct ModelShape {
  Backbone backbone = Backbone::kGnn;
  EnvKind env = EnvKind::kCar;
  int hidden = 64;
  int layers = 3;  // GNN message-passing rounds, or MLP hidden layers

  bool operator==(const ModelShape&) const = default;
};

/// Anything that maps one observation and a batch of actions (rows) to scores.
template <class S>
concept AdmissibilityScorer = requires(const S& s, const Observation& o, const Matrix& a) {
  { s.score_batch(o, a) } -> std::convertible_to<Eigen::VectorXd>;
};

class CamModel {
 public:
  CamModel() = default;

  static CamModel create(const ModelShape& shape, std::uint64_t seed) {
    if (shape.hidden < 1 || shape.layers < 1) throw ContractError("CamModel: hidden width and layer count must be >= 1");
    const bool graph = is_graph_env(shape.env);
    if (graph != (shape.backbone == Backbone::kGnn))
      throw ContractError("CamModel: " + to_string(shape.env) + " requires the " + (graph ? "gnn" : "mlp") + " backbone");
    Rng rng = make_rng(seed, {0x1a7e45ULL});
    CamModel m;
    m.shape_ = shape;
    const int H = shape.hidden;
    const int d = action_dim(shape.env);
    using diff::Activation;
    if (graph) {
      m.node_embed = diff::make_mlp("g_m", {kNodeFeatureWidth, H}, Activation::kRelu, Activation::kRelu, rng);
      m.edge_embed = diff::make_mlp("g_n", {edge_feature_width(shape.env), H}, Activation::kRelu, Activation::kRelu, rng);
      for (int k = 0; k < shape.layers; ++k) {
        m.message.push_back(diff::make_mlp("f_m" + std::to_string(k), {H, H, H}, Activation::kRelu, Activation::kRelu, rng));
        m.edge_update.push_back(
            diff::make_mlp("f_n" + std::to_string(k), {2 * H, H, H}, Activation::kRelu, Activation::kRelu, rng));
      }
      m.head = diff::make_mlp("f", {H + d, H, 1}, Activation::kRelu, Activation::kNone, rng);
    } else {
      std::vector<int> widths{raw_feature_width(shape.env) + d};
      for (int i = 0; i < shape.layers; ++i) widths.push_back(H);
      widths.push_back(1);
      m.head = diff::make_mlp("f", widths, Activation::kRelu, Activation::kNone, rng);
    }
    return m;
  }

  const ModelShape& shape() const { return shape_; }
  EnvKind env() const { return shape_.env; }
  int action_width() const { return action_dim(shape_.env); }
  int hidden_width() const {
    return shape_.backbone == Backbone::kGnn ? shape_.hidden : raw_feature_width(shape_.env);
  }

  /// Hidden state h shared by every action scored against this observation.
  /// GNN: the ego node's final embedding. MLP: the raw state features.
  Eigen::VectorXd encode(const Observation& obs) const {
    if (shape_.backbone == Backbone::kMlp) {
      const auto* raw = std::get_if<RawState>(&obs);
      if (!raw) throw ContractError("CamModel::encode: MLP backbone needs a raw state observation");
      if (raw->x.size() != raw_feature_width(shape_.env)) throw ShapeError("CamModel::encode: raw state width mismatch");
      return raw->x;
    }
    const auto* g = std::get_if<EgoGraph>(&obs);
    if (!g) throw ContractError("CamModel::encode: GNN backbone needs a graph observation");
    return encode_graph(*g);
  }

  /// f(h, a) for every action row. The h-dependent part of the first layer is
  /// computed once and broadcast over the batch.
  Eigen::VectorXd head_scores(const Eigen::VectorXd& h, const Matrix& actions) const {
    if (h.size() != hidden_width()) throw ShapeError("head_scores: hidden width mismatch");
    if (actions.cols() != action_width()) throw ShapeError("head_scores: action width mismatch");
    const diff::Dense& first = head.front();
    const Eigen::Index hw = h.size();
    Eigen::RowVectorXd pre = (first.weight.value.leftCols(hw) * h).transpose() + first.bias.value.row(0);
    Matrix z(actions.rows(), first.out_width());
    z.noalias() = actions * first.weight.value.rightCols(actions.cols()).transpose();
    z.rowwise() += pre;
    if (first.activation == diff::Activation::kRelu) z = z.cwiseMax(0.0);
    Matrix out = diff::forward_mlp_batch(std::span<const diff::Dense>(head).subspan(1), z);
    return out.col(0);
  }

  Eigen::VectorXd score_batch(const Observation& obs, const Matrix& actions) const {
    return head_scores(encode(obs), actions);
  }

  double score(const Observation& obs, const Eigen::VectorXd& action) const {
    Matrix row = action.transpose();
    return score_batch(obs, row)[0];
  }

  // -------------------------------------------------------------------------
  // Recording path used for training.

  /// Hidden states (one row per observation) for a batch; graphs are merged
  /// into one disjoint union so each layer runs as a single matrix product.
  diff::Var encode_batch(diff::Tape& tape, std::span<const Observation* const> batch) {
    if (shape_.backbone == Backbone::kMlp) {
      Matrix x(static_cast<Eigen::Index>(batch.size()), hidden_width());
      for (std::size_t i = 0; i < batch.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = encode(*batch[i]).transpose();
      return tape.constant(std::move(x));
    }
    const int E = edge_feature_width(shape_.env);
    std::size_t node_total = 0, edge_total = 0;
    for (const Observation* o : batch) {
      const auto* g = std::get_if<EgoGraph>(o);
      if (!g) throw ContractError("encode_batch: GNN backbone needs graph observations");
      node_total += g->nodes.size();
      edge_total += g->edges.size();
    }
    Matrix nodes = Matrix::Zero(static_cast<Eigen::Index>(node_total), kNodeFeatureWidth);
    Matrix edges(static_cast<Eigen::Index>(edge_total), E);
    std::vector<int> dst;
    std::vector<int> ego;
    dst.reserve(edge_total);
    int node_offset = 0;
    Eigen::Index edge_row = 0;
    for (const Observation* o : batch) {
      const auto& g = std::get<EgoGraph>(*o);
      for (std::size_t i = 0; i < g.nodes.size(); ++i)
        nodes(node_offset + static_cast<Eigen::Index>(i), static_cast<int>(g.nodes[i])) = 1.0;
      for (const GraphEdge& e : g.edges) {
        if (static_cast<int>(e.features.size()) != E) throw ShapeError("encode_batch: edge feature width mismatch");
        for (int c = 0; c < E; ++c) edges(edge_row, c) = e.features[static_cast<std::size_t>(c)];
        dst.push_back(node_offset + e.dst);
        ++edge_row;
      }
      ego.push_back(node_offset + g.ego);
      node_offset += static_cast<int>(g.nodes.size());
    }
    diff::Var m = diff::forward_mlp(tape, node_embed, tape.constant(std::move(nodes)));
    diff::Var n = diff::forward_mlp(tape, edge_embed, tape.constant(std::move(edges)));
    for (int k = 0; k < shape_.layers; ++k) {
      diff::Var msg = diff::forward_mlp(tape, message[static_cast<std::size_t>(k)], n);
      m = tape.add(m, tape.segment_max(msg, dst, node_offset));
      diff::Var md = tape.gather_rows(m, dst);
      n = tape.add(n, diff::forward_mlp(tape, edge_update[static_cast<std::size_t>(k)], tape.concat_cols(md, n)));
    }
    return tape.gather_rows(m, ego);
  }

  /// Scores row i of `actions` against hidden row i of `hidden`.
  diff::Var head_batch(diff::Tape& tape, diff::Var hidden, const Matrix& actions) {
    if (tape.value(hidden).rows() != actions.rows()) throw ShapeError("head_batch: row count mismatch");
    return diff::forward_mlp(tape, head, tape.concat_cols(hidden, tape.constant(actions)));
  }

  /// Every trainable tensor in declared order: g_m, g_n, then (f_m, f_n) per
  /// round, then the head f.
  std::vector<diff::ParamTensor*> parameters() {
    std::vector<diff::ParamTensor*> out;
    auto add = [&out](std::vector<diff::Dense>& layers) {
      for (auto& l : layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    };
    add(node_embed);
    add(edge_embed);
    for (std::size_t k = 0; k < message.size(); ++k) {
      add(message[k]);
      add(edge_update[k]);
    }
    add(head);
    return out;
  }

  std::vector<const diff::ParamTensor*> parameters() const {
    auto ps = const_cast<CamModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<diff::Dense> node_embed;
  std::vector<diff::Dense> edge_embed;
  std::vector<std::vector<diff::Dense>> message;
  std::vector<std::vector<diff::Dense>> edge_update;
  std::vector<diff::Dense> head;

 private:
  Eigen::VectorXd encode_graph(const EgoGraph& g) const {
    if (g.env != shape_.env) throw ContractError("CamModel::encode: graph environment does not match model");
    const int E = edge_feature_width(shape_.env);
    const auto n_nodes = static_cast<Eigen::Index>(g.nodes.size());
    const auto n_edges = static_cast<Eigen::Index>(g.edges.size());
    Matrix nodes = Matrix::Zero(n_nodes, kNodeFeatureWidth);
    for (Eigen::Index i = 0; i < n_nodes; ++i) nodes(i, static_cast<int>(g.nodes[static_cast<std::size_t>(i)])) = 1.0;
    Matrix m = diff::forward_mlp_batch(node_embed, nodes);
    if (n_edges == 0) return m.row(g.ego).transpose();

    Matrix edges(n_edges, E);
    for (Eigen::Index r = 0; r < n_edges; ++r) {
      const auto& f = g.edges[static_cast<std::size_t>(r)].features;
      if (static_cast<int>(f.size()) != E) throw ShapeError("CamModel::encode: edge feature width mismatch");
      for (int c = 0; c < E; ++c) edges(r, c) = f[static_cast<std::size_t>(c)];
    }
    Matrix n = diff::forward_mlp_batch(edge_embed, edges);
    const int H = shape_.hidden;
    for (std::size_t k = 0; k < message.size(); ++k) {
      const Matrix msg = diff::forward_mlp_batch(message[k], n);
      Matrix agg = Matrix::Zero(n_nodes, H);
      std::vector<char> seen(static_cast<std::size_t>(n_nodes), 0);
      for (Eigen::Index r = 0; r < n_edges; ++r) {
        const int d = g.edges[static_cast<std::size_t>(r)].dst;
        if (!seen[static_cast<std::size_t>(d)]) {
          agg.row(d) = msg.row(r);
          seen[static_cast<std::size_t>(d)] = 1;
        } else {
          agg.row(d) = agg.row(d).cwiseMax(msg.row(r));
        }
      }
      m += agg;
      Matrix cat(n_edges, 2 * H);
      for (Eigen::Index r = 0; r < n_edges; ++r) {
        cat.row(r).head(H) = m.row(g.edges[static_cast<std::size_t>(r)].dst);
        cat.row(r).tail(H) = n.row(r);
      }
      n += diff::forward_mlp_batch(edge_update[k], cat);
    }
    return m.row(g.ego).transpose();
  }

  ModelShape shape_;
};

// ---------------------------------------------------------------------------
// Composition and selection

/// Candidate actions with admissibility (phi) and preference (omega) scores.
struct ScoredActions {
  Matrix actions;
  Eigen::VectorXd phi;
  Eigen::VectorXd omega;

  int size() const { return static_cast<int>(actions.rows()); }
};

/// Elementwise minimum: the composed model admits an action iff every part does.
inline Eigen::VectorXd compose_min(std::span<const Eigen::VectorXd> scores) {
  if (scores.empty()) throw ContractError("compose_min: need at least one score list");
  Eigen::VectorXd out = scores.front();
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i].size() != out.size()) throw ShapeError("compose_min: score lists differ in length");
    out = out.cwiseMin(scores[i]);
  }
  return out;
}

inline Eigen::VectorXd compose_min(const std::vector<Eigen::VectorXd>& scores) {
  return compose_min(std::span<const Eigen::VectorXd>(scores));
}

/// Scores every decomposed subgraph and keeps the running minimum, starting
/// from +infinity.
template <AdmissibilityScorer Scorer>
Eigen::VectorXd score_with_decomposition(const Scorer& model, const EgoGraph& graph, const Matrix& actions,
                                         const SubgraphCaps& caps, Rng& rng) {
  Eigen::VectorXd phi = Eigen::VectorXd::Constant(actions.rows(), std::numeric_limits<double>::infinity());
  for (const EgoGraph& sub : decompose(graph, caps, rng)) phi = phi.cwiseMin(model.score_batch(Observation(sub), actions));
  return phi;
}

/// Hidden states to score against: one per subgraph when decomposing a graph
/// observation, otherwise just the observation's own.
inline std::vector<Eigen::VectorXd> hidden_states(const CamModel& model, const Observation& obs,
                                                  const SubgraphCaps* caps, Rng& rng) {
  std::vector<Eigen::VectorXd> hs;
  if (caps && std::holds_alternative<EgoGraph>(obs)) {
    for (const EgoGraph& sub : decompose(std::get<EgoGraph>(obs), *caps, rng)) hs.push_back(model.encode(sub));
  } else {
    hs.push_back(model.encode(obs));
  }
  return hs;
}

inline Eigen::VectorXd min_head_scores(const CamModel& model, std::span<const Eigen::VectorXd> hidden,
                                       const Matrix& actions) {
  Eigen::VectorXd phi = Eigen::VectorXd::Constant(actions.rows(), std::numeric_limits<double>::infinity());
  for (const auto& h : hidden) phi = phi.cwiseMin(model.head_scores(h, actions));
  return phi;
}

struct Selection {
  int index = -1;
  Eigen::VectorXd action;
  bool admissible = false;
};

/// Highest-preference admissible candidate (phi >= 0). With no admissible
/// candidate, the highest-phi one perturbed by uniform noise in +-noise_mag
/// per dimension and clamped to the box. Ties go to the lowest index.
inline Selection select_action(const ScoredActions& scored, double noise_mag, Rng& rng, const ActionBox& box) {
  const int n = scored.size();
  if (n < 1) throw ContractError("select_action: need at least one candidate");
  if (scored.phi.size() != n || scored.omega.size() != n) throw ShapeError("select_action: score lengths differ");
  Selection s;
  for (int i = 0; i < n; ++i) {
    if (scored.phi[i] >= 0.0 && (s.index < 0 || scored.omega[i] > scored.omega[s.index])) s.index = i;
  }
  if (s.index >= 0) {
    s.admissible = true;
    s.action = scored.actions.row(s.index).transpose();
    return s;
  }
  s.index = 0;
  for (int i = 1; i < n; ++i)
    if (scored.phi[i] > scored.phi[s.index]) s.index = i;
  s.action = scored.actions.row(s.index).transpose();
  if (noise_mag > 0.0) {
    for (Eigen::Index j = 0; j < s.action.size(); ++j) s.action[j] += uniform(rng, -noise_mag, noise_mag);
    s.action = box.clamp(s.action);
  }
  return s;
}

inline double admissible_ratio(const ScoredActions& scored) {
  if (scored.phi.size() == 0) return 0.0;
  return static_cast<double>((scored.phi.array() >= 0.0).count()) / static_cast<double>(scored.phi.size());
}

inline double admissible_ratio(const Eigen::VectorXd& phi) {
  if (phi.size() == 0) return 0.0;
  return static_cast<double>((phi.array() >= 0.0).count()) / static_cast<double>(phi.size());
}

/// One agent's pending work for adaptive scoring: its hidden state(s) and the
/// full candidate set with preferences already attached.
struct AgentQuery {
  std::vector<Eigen::VectorXd> hidden;
  Matrix actions;
  Eigen::VectorXd omega;
};

/// Scores candidates chunk by chunk across all agents. An agent drops out as
/// soon as an evaluated chunk holds an admissible action; its result is
/// truncated to the candidates evaluated so far. Agents that never find one
/// are evaluated to exhaustion.
inline std::vector<ScoredActions> adaptive_agent_scoring(const CamModel& model, std::span<const AgentQuery> agents,
                                                         int chunk_size) {
  if (chunk_size < 1) throw ContractError("adaptive_agent_scoring: chunk_size must be >= 1");
  const std::size_t n = agents.size();
  std::vector<Eigen::VectorXd> phi(n);
  std::vector<Eigen::Index> done(n, 0);
  std::vector<char> open(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    phi[i].resize(agents[i].actions.rows());
    if (agents[i].actions.rows() == 0) open[i] = 0;
  }
  bool any_open = true;
  while (any_open) {
    any_open = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!open[i]) continue;
      const Matrix& a = agents[i].actions;
      const Eigen::Index len = std::min<Eigen::Index>(chunk_size, a.rows() - done[i]);
      const Matrix chunk = a.middleRows(done[i], len);
      const Eigen::VectorXd s = min_head_scores(model, agents[i].hidden, chunk);
      phi[i].segment(done[i], len) = s;
      done[i] += len;
      if ((s.array() >= 0.0).any() || done[i] == a.rows())
        open[i] = 0;
      else
        any_open = true;
    }
  }
  std::vector<ScoredActions> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].actions = agents[i].actions.topRows(done[i]);
    out[i].phi = phi[i].head(done[i]);
    out[i].omega = agents[i].omega.head(done[i]);
  }
  return out;
}

}  // namespace cam
