#pragma once

// Online training: rollouts with exploration, binary safety labels,
// backward relabeling of finished episodes, and the three-term margin loss.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cam/cam_core.hpp"
#include "cam/diffcore.hpp"
#include "cam/error.hpp"
#include "cam/random.hpp"
#include "cam/rollout.hpp"
#include "cam/worlds.hpp"

namespace cam {

enum class Label : int { kAdmissible = 0, kInadmissible = 1 };

struct Transition {
  std::shared_ptr<const Observation> state;
  Eigen::VectorXd action;
  Label label = Label::kAdmissible;
  std::shared_ptr<const Observation> next_state;
  std::optional<Eigen::VectorXd> next_action;  // absent at the end of a chain
  bool relabeled = false;
  int episode = 0;
  int step = 0;
  int agent = 0;
};

/// Bounded FIFO; the oldest transitions are evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 200000) : capacity_(capacity) {
    if (capacity == 0) throw ContractError("ReplayBuffer: capacity must be positive");
  }

  void push(Transition t) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(t));
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }

  /// Uniform minibatch. Indices are distinct when the buffer holds at least
  /// `batch` items and drawn with replacement otherwise.
  std::vector<const Transition*> sample(std::size_t batch, Rng& rng) const {
    if (items_.empty()) throw ContractError("ReplayBuffer::sample: buffer is empty");
    std::vector<const Transition*> out;
    out.reserve(batch);
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    if (items_.size() < batch) {
      for (std::size_t i = 0; i < batch; ++i) out.push_back(&items_[pick(rng)]);
      return out;
    }
    // Floyd's algorithm for distinct indices.
    std::unordered_set<std::size_t> taken;
    std::vector<std::size_t> idx;
    const std::size_t n = items_.size();
    for (std::size_t j = n - batch; j < n; ++j) {
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
      const std::size_t v = taken.insert(t).second ? t : j;
      if (v == j) taken.insert(j);
      idx.push_back(v);
    }
    for (std::size_t i : idx) out.push_back(&items_[i]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

struct TrainConfig {
  double gamma1 = 0.0;
  double gamma2 = 2e-2;
  double gamma3 = 1e-2;
  double lambda = 0.1;
  int candidates = 2000;
  int relabel_probes = 0;  // 0 probes with `candidates` actions
  int batch_size = 256;
  int update_every = 10;
  int gradient_steps = 100;
  int episodes = 1000;
  double noise_fraction = 0.1;
  double epsilon = 0.0;
  std::size_t buffer_capacity = 200000;
  double lr = 1e-3;
  double min_lr = 1e-5;
  int plateau_patience = 5;
  int validation_interval = 10;  // in updates
  int validation_episodes = 10;
  int early_stop_rounds = 0;  // 0 disables early stopping
  double early_stop_success = 1.0;
  std::uint64_t seed = 0;
};

inline TrainConfig default_train_config(EnvKind env) {
  TrainConfig c;
  if (env == EnvKind::kDrone) {
    c.gamma2 = 1e-1;
    c.update_every = 20;
  }
  return c;
}

inline Label label_transition(const WorldState& next_world, int agent) {
  return check_collisions(next_world)[static_cast<std::size_t>(agent)] ? Label::kInadmissible : Label::kAdmissible;
}

/// Backward pass over one finished chain: y_t becomes inadmissible when
/// y_{t+1} is inadmissible and no probed action at x_{t+1} scores >= 0.
/// Returns the number of labels flipped.
template <AdmissibilityScorer Scorer>
int relabel_episode(const Scorer& model, std::span<Transition> chain, EnvKind env, int n_probe, Rng& rng) {
  if (n_probe < 1) throw ContractError("relabel_episode: n_probe must be >= 1");
  const ActionBox box = action_box(env);
  int count = 0;
  for (int t = static_cast<int>(chain.size()) - 2; t >= 0; --t) {
    const Transition& next = chain[static_cast<std::size_t>(t + 1)];
    if (next.label != Label::kInadmissible) continue;
    const Matrix probes = sample_box(rng, n_probe, box.low, box.high);
    if (model.score_batch(*next.state, probes).maxCoeff() >= 0.0) continue;
    Transition& cur = chain[static_cast<std::size_t>(t)];
    if (cur.label != Label::kInadmissible) {
      cur.label = Label::kInadmissible;
      cur.relabeled = true;
      ++count;
    }
  }
  return count;
}

/// Turns one agent's recorded steps into a linked transition chain.
inline std::vector<Transition> build_chain(const EpisodeResult& r, int agent, int episode) {
  const auto& steps = r.steps[static_cast<std::size_t>(agent)];
  std::vector<Transition> chain;
  chain.reserve(steps.size());
  for (std::size_t k = 0; k < steps.size(); ++k) {
    Transition t;
    t.state = steps[k].obs;
    t.action = steps[k].action;
    t.label = steps[k].collision_next ? Label::kInadmissible : Label::kAdmissible;
    if (k + 1 < steps.size()) {
      t.next_state = steps[k + 1].obs;
      t.next_action = steps[k + 1].action;
    } else {
      t.next_state = r.final_obs[static_cast<std::size_t>(agent)];
    }
    t.episode = episode;
    t.step = steps[k].t;
    t.agent = agent;
    chain.push_back(std::move(t));
  }
  return chain;
}

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double gamma1 = 0.0;
  double gamma2 = 2e-2;
  double gamma3 = 1e-2;
  double lambda = 0.1;
};

inline LossWeights loss_weights(const TrainConfig& c) { return {c.gamma1, c.gamma2, c.gamma3, c.lambda}; }

struct LossTerms {
  double admissible = 0.0;
  double inadmissible = 0.0;
  double invariance = 0.0;
  double total() const { return admissible + inadmissible + invariance; }
};

struct LossVars {
  diff::Var admissible;
  diff::Var inadmissible;
  diff::Var invariance;
  diff::Var total;
};

/// Recorded loss on `tape`:
///   mean_{R0} relu(g1 - phi) + mean_{Rd} relu(g2 + phi)
///   + mean_{R0 with successor} relu(g3 - (phi' - phi) - lambda * phi).
/// An empty partition contributes zero.
inline LossVars cam_loss(diff::Tape& tape, CamModel& model, std::span<const Transition* const> batch,
                         const LossWeights& w) {
  std::vector<const Observation*> obs;
  std::vector<int> adm, inadm, inv_cur, inv_next;
  const int d = model.action_width();
  std::vector<Eigen::VectorXd> acts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& t = *batch[i];
    obs.push_back(t.state.get());
    acts.push_back(t.action);
    const int row = static_cast<int>(i);
    (t.label == Label::kAdmissible ? adm : inadm).push_back(row);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& t = *batch[i];
    if (t.label != Label::kAdmissible || !t.next_action || !t.next_state) continue;
    inv_cur.push_back(static_cast<int>(i));
    inv_next.push_back(static_cast<int>(obs.size()));
    obs.push_back(t.next_state.get());
    acts.push_back(*t.next_action);
  }
  Matrix actions(static_cast<Eigen::Index>(acts.size()), d);
  for (std::size_t i = 0; i < acts.size(); ++i) {
    if (acts[i].size() != d) throw ShapeError("cam_loss: action width mismatch");
    actions.row(static_cast<Eigen::Index>(i)) = acts[i].transpose();
  }
  const diff::Var phi = model.head_batch(tape, model.encode_batch(tape, obs), actions);

  LossVars v;
  v.admissible = tape.mean(tape.relu(tape.scale(tape.gather_rows(phi, adm), -1.0, w.gamma1)));
  v.inadmissible = tape.mean(tape.relu(tape.scale(tape.gather_rows(phi, inadm), 1.0, w.gamma2)));
  const diff::Var cur = tape.gather_rows(phi, inv_cur);
  const diff::Var nxt = tape.gather_rows(phi, inv_next);
  // g3 - (phi' - phi) - lambda*phi = g3 + (1 - lambda)*phi - phi'
  const diff::Var margin = tape.scale(tape.sub(tape.scale(cur, 1.0 - w.lambda), nxt), 1.0, w.gamma3);
  v.invariance = tape.mean(tape.relu(margin));
  v.total = tape.add(tape.add(v.admissible, v.inadmissible), v.invariance);
  return v;
}

/// The same loss through the plain scoring path, per term.
template <AdmissibilityScorer Scorer>
LossTerms cam_loss_value(const Scorer& model, std::span<const Transition* const> batch, const LossWeights& w) {
  std::vector<double> a, b, c;
  for (const Transition* t : batch) {
    const Matrix row = t->action.transpose();
    const double phi = model.score_batch(*t->state, row)[0];
    if (t->label == Label::kAdmissible) {
      a.push_back(std::max(0.0, w.gamma1 - phi));
      if (t->next_action && t->next_state) {
        const Matrix next_row = t->next_action->transpose();
        const double phi_next = model.score_batch(*t->next_state, next_row)[0];
        c.push_back(std::max(0.0, w.gamma3 - (phi_next - phi) - w.lambda * phi));
      }
    } else {
      b.push_back(std::max(0.0, w.gamma2 + phi));
    }
  }
  auto mean = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  return {mean(a), mean(b), mean(c)};
}

/// One Adam step on a minibatch. Returns the pre-step loss terms.
inline LossTerms gradient_step(CamModel& model, diff::AdamState& adam, std::span<const Transition* const> batch,
                               const LossWeights& w) {
  diff::Tape tape;
  model.zero_grad();
  const LossVars v = cam_loss(tape, model, batch, w);
  const LossTerms terms{tape.scalar(v.admissible), tape.scalar(v.inadmissible), tape.scalar(v.invariance)};
  if (!std::isfinite(terms.total())) throw NumericError("training loss became non-finite");
  tape.backward(v.total);
  auto params = model.parameters();
  diff::adam_update(params, adam);
  return terms;
}

// ---------------------------------------------------------------------------
// Training loop

struct TelemetryRow {
  int episode = 0;
  double success = 0.0;
  double success_window = 0.0;
  int relabels = 0;
  double admissible_ratio = 0.0;
  std::optional<double> loss;
  double lr = 0.0;
  int collisions = 0;
  int ticks = 0;
  std::optional<double> validation;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["episode"] = episode;
    j["success"] = success;
    j["success_window"] = success_window;
    j["relabel_count"] = relabels;
    j["admissible_ratio"] = admissible_ratio;
    j["loss"] = loss ? nlohmann::ordered_json(*loss) : nlohmann::ordered_json(nullptr);
    j["lr"] = lr;
    j["collision_steps"] = collisions;
    j["ticks"] = ticks;
    if (validation) j["validation_success"] = *validation;
    return j;
  }
};

struct TrainHooks {
  std::ostream* telemetry = nullptr;  // one JSON object per line
  std::function<void(const CamModel&, const std::string& tag)> checkpoint;
};

struct TrainResult {
  CamModel model;
  std::vector<TelemetryRow> telemetry;
  int episodes_run = 0;
  int updates = 0;
  bool early_stopped = false;
  double final_lr = 0.0;
};

namespace detail {
enum TrainStream : std::uint64_t { kTrainTask = 11, kTrainRollout = 12, kRelabel = 13, kMinibatch = 14, kValidationTask = 15, kValidationRollout = 16 };
}

inline TaskSpec task_for(const TaskSpec& base, std::uint64_t seed) {
  TaskSpec s = base;
  s.seed = seed;
  return s;
}

/// Greedy episodes on held-out tasks; returns the mean per-agent success.
inline double validate(const CamModel& model, const TaskSpec& base, const TrainConfig& cfg) {
  if (cfg.validation_episodes < 1) return 0.0;
  double total = 0.0;
  for (int e = 0; e < cfg.validation_episodes; ++e) {
    const std::uint64_t ue = static_cast<std::uint64_t>(e);
    const WorldState w = sample_task(task_for(base, derive_seed(cfg.seed, {detail::kValidationTask, ue})));
    RolloutOptions opt;
    opt.candidates = cfg.candidates;
    opt.seed = derive_seed(cfg.seed, {detail::kValidationRollout, ue});
    total += success_rate(run_episode(model, w, base.horizon, opt));
  }
  return total / cfg.validation_episodes;
}

inline void check_train_config(const TrainConfig& c) {
  if (c.gamma1 < 0 || c.gamma2 < 0 || c.gamma3 < 0) throw ConfigError("train: margins must be non-negative");
  if (c.candidates < 1) throw ConfigError("train.candidates must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.update_every < 1) throw ConfigError("train.update_every must be >= 1");
  if (c.gradient_steps < 0) throw ConfigError("train.gradient_steps must be >= 0");
  if (c.episodes < 0) throw ConfigError("train.episodes must be >= 0");
  if (c.validation_interval < 1) throw ConfigError("train.validation_interval must be >= 1");
  if (!(c.lr > 0) || !(c.min_lr > 0) || c.min_lr > c.lr) throw ConfigError("train: need 0 < min_lr <= lr");
}

/// Algorithm 1: roll out, relabel each finished episode with the current
/// model, store, and fit every `update_every` episodes.
inline TrainResult train(const ModelShape& shape, const TaskSpec& task, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  check_train_config(cfg);
  TrainResult res;
  res.model = CamModel::create(shape, cfg.seed);
  CamModel& model = res.model;
  ReplayBuffer buffer(cfg.buffer_capacity);
  diff::AdamState adam;
  adam.lr = cfg.lr;
  adam.min_lr = cfg.min_lr;
  adam.patience = cfg.plateau_patience;
  const LossWeights weights = loss_weights(cfg);
  const int probes = cfg.relabel_probes > 0 ? cfg.relabel_probes : cfg.candidates;
  std::deque<double> window;
  double window_sum = 0.0;
  int good_rounds = 0;

  for (int ep = 0; ep < cfg.episodes; ++ep) {
    const std::uint64_t uep = static_cast<std::uint64_t>(ep);
    const WorldState w = sample_task(task_for(task, derive_seed(cfg.seed, {detail::kTrainTask, uep})));
    RolloutOptions opt;
    opt.candidates = cfg.candidates;
    opt.noise_fraction = cfg.noise_fraction;
    opt.epsilon = cfg.epsilon;
    opt.keep_observations = true;
    opt.seed = derive_seed(cfg.seed, {detail::kTrainRollout, uep});
    const EpisodeResult r = run_episode(model, w, task.horizon, opt);

    TelemetryRow row;
    row.episode = ep;
    Rng relabel_rng = make_rng(cfg.seed, {detail::kRelabel, uep});
    for (int i = 0; i < static_cast<int>(r.steps.size()); ++i) {
      std::vector<Transition> chain = build_chain(r, i, ep);
      row.relabels += relabel_episode(model, std::span<Transition>(chain), task.env, probes, relabel_rng);
      for (auto& t : chain) buffer.push(std::move(t));
    }
    row.success = success_rate(r);
    row.admissible_ratio = r.admissible_ratio;
    row.ticks = r.ticks;
    for (const auto& a : r.agents)
      for (char c : a.collision) row.collisions += c;
    window.push_back(row.success);
    window_sum += row.success;
    if (window.size() > 20) {
      window_sum -= window.front();
      window.pop_front();
    }
    row.success_window = window_sum / static_cast<double>(window.size());

    bool stop = false;
    if ((ep + 1) % cfg.update_every == 0 && buffer.size() > 0 && cfg.gradient_steps > 0) {
      const std::uint64_t uu = static_cast<std::uint64_t>(res.updates);
      LossTerms last;
      for (int s = 0; s < cfg.gradient_steps; ++s) {
        Rng mb = make_rng(cfg.seed, {detail::kMinibatch, uu, static_cast<std::uint64_t>(s)});
        const auto batch = buffer.sample(static_cast<std::size_t>(cfg.batch_size), mb);
        try {
          last = gradient_step(model, adam, batch, weights);
        } catch (const NumericError&) {
          if (hooks.checkpoint) hooks.checkpoint(model, "diverged");
          throw;
        }
      }
      row.loss = last.total();
      ++res.updates;
      if (res.updates % cfg.validation_interval == 0) {
        const double v = validate(model, task, cfg);
        row.validation = v;
        diff::lr_plateau_step(adam, v);
        if (hooks.checkpoint) hooks.checkpoint(model, "update_" + std::to_string(res.updates));
        good_rounds = v >= cfg.early_stop_success ? good_rounds + 1 : 0;
        stop = cfg.early_stop_rounds > 0 && good_rounds >= cfg.early_stop_rounds;
      }
    }
    row.lr = adam.lr;
    if (hooks.telemetry) *hooks.telemetry << row.to_json().dump() << '\n';
    res.telemetry.push_back(row);
    res.episodes_run = ep + 1;
    if (stop) {
      res.early_stopped = true;
      break;
    }
  }
  res.final_lr = adam.lr;
  if (hooks.checkpoint) hooks.checkpoint(model, "final");
  return res;
}

}  // namespace cam
