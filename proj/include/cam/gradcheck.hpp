#pragma once

// Finite-difference verification of the training loss gradients on small
// random models and random transition batches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cam/cam_core.hpp"
#include "cam/diffcore.hpp"
#include "cam/graph.hpp"
#include "cam/random.hpp"
#include "cam/trainer.hpp"
#include "cam/worlds.hpp"

namespace cam {

struct GradcheckOptions {
  EnvKind env = EnvKind::kCar;
  int draws = 100;
  int hidden = 8;
  int layers = 2;
  int batch = 16;
  double eps = 1e-4;
  double tolerance = 1e-5;
  bool corrupt = false;  // negative control: perturb the analytic gradient
  std::uint64_t seed = 0;
};

struct GradcheckDraw {
  double max_rel_error = 0.0;
  double term_error[3] = {0.0, 0.0, 0.0};  // admissible, inadmissible, invariance
  double total_error = 0.0;
  int coordinates = 0;
  int kinks = 0;
};

struct GradcheckReport {
  EnvKind env = EnvKind::kCar;
  int draws = 0;
  double max_rel_error = 0.0;
  double max_term_error[3] = {0.0, 0.0, 0.0};
  double max_total_error = 0.0;
  long coordinates = 0;
  long kinks = 0;
  double tolerance = 1e-5;
  bool passed() const { return max_rel_error < tolerance; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["env"] = to_string(env);
    j["draws"] = draws;
    j["max_rel_error"] = max_rel_error;
    j["admissible_term_error"] = max_term_error[0];
    j["inadmissible_term_error"] = max_term_error[1];
    j["invariance_term_error"] = max_term_error[2];
    j["total_error"] = max_total_error;
    j["coordinates"] = coordinates;
    j["kink_coordinates"] = kinks;
    j["tolerance"] = tolerance;
    j["passed"] = passed();
    return j;
  }
};

/// ||a - f|| / max(||a||, ||f||), zero when both vanish.
inline double gradient_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nf += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nf));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

/// Random transitions from short random walks on freshly sampled tasks.
inline std::vector<Transition> random_transitions(EnvKind env, int count, Rng& rng) {
  std::vector<Transition> out;
  const ActionBox box = action_box(env);
  const bool single = !is_graph_env(env);
  for (int i = 0; i < count; ++i) {
    TaskSpec spec;
    spec.env = env;
    spec.agents = single ? 1 : 3;
    spec.obstacles = single ? 0 : 3;
    spec.seed = rng();
    WorldState w = sample_task(spec);
    const int warmup = static_cast<int>(rng() % 6);
    auto random_step = [&](WorldState& s) {
      for (auto& a : s.agents) {
        const Eigen::VectorXd u = sample_box(rng, 1, box.low, box.high).row(0).transpose();
        a = step_agent(env, a, u);
      }
    };
    for (int k = 0; k < warmup; ++k) random_step(w);
    const int agent = static_cast<int>(rng() % static_cast<std::uint64_t>(w.agent_count()));
    Transition t;
    t.state = std::make_shared<const Observation>(observe(w, agent));
    t.action = sample_box(rng, 1, box.low, box.high).row(0).transpose();
    WorldState next = w;
    random_step(next);
    t.next_state = std::make_shared<const Observation>(observe(next, agent));
    t.label = uniform(rng, 0.0, 1.0) < 0.5 ? Label::kAdmissible : Label::kInadmissible;
    if (uniform(rng, 0.0, 1.0) < 0.75) t.next_action = sample_box(rng, 1, box.low, box.high).row(0).transpose();
    t.step = i;
    out.push_back(std::move(t));
  }
  return out;
}

/// One random model and batch. Coordinates where the loss has a kink inside
/// the +-eps stencil (one-sided slopes disagree) are excluded, since central
/// differences are not a derivative there.
inline GradcheckDraw gradcheck_draw(const GradcheckOptions& opt, std::uint64_t draw_seed) {
  Rng rng = make_rng(draw_seed, {0x9c});
  ModelShape shape;
  shape.env = opt.env;
  shape.backbone = is_graph_env(opt.env) ? Backbone::kGnn : Backbone::kMlp;
  shape.hidden = opt.hidden;
  shape.layers = opt.layers;
  CamModel model = CamModel::create(shape, rng());
  const std::vector<Transition> data = random_transitions(opt.env, opt.batch, rng);
  std::vector<const Transition*> batch;
  for (const auto& t : data) batch.push_back(&t);
  const std::span<const Transition* const> view(batch);

  LossWeights w = loss_weights(default_train_config(opt.env));
  w.gamma1 = uniform(rng, 0.0, 0.05);
  w.lambda = uniform(rng, 0.0, 0.5);

  auto params = model.parameters();
  // analytic[term][coordinate]; term 3 is the total
  std::vector<std::vector<double>> analytic(4);
  for (int term = 0; term < 4; ++term) {
    model.zero_grad();
    diff::Tape tape;
    const LossVars v = cam_loss(tape, model, view, w);
    const diff::Var vars[4] = {v.admissible, v.inadmissible, v.invariance, v.total};
    tape.backward(vars[term]);
    for (const auto* p : params)
      for (Eigen::Index i = 0; i < p->grad.size(); ++i) analytic[static_cast<std::size_t>(term)].push_back(p->grad.data()[i]);
  }
  if (opt.corrupt)
    for (auto& g : analytic)
      for (double& x : g) x = x * 1.01 + 1e-3;

  std::vector<std::vector<double>> numeric(4), kept_analytic(4);
  GradcheckDraw out;
  const LossTerms center = cam_loss_value(model, view, w);
  const double c[4] = {center.admissible, center.inadmissible, center.invariance, center.total()};
  std::size_t flat = 0;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i, ++flat) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + opt.eps;
      const LossTerms up = cam_loss_value(model, view, w);
      x = saved - opt.eps;
      const LossTerms down = cam_loss_value(model, view, w);
      x = saved;
      const double u[4] = {up.admissible, up.inadmissible, up.invariance, up.total()};
      const double d[4] = {down.admissible, down.inadmissible, down.invariance, down.total()};
      ++out.coordinates;
      bool kink = false;
      for (int k = 0; k < 4; ++k) {
        const double right = (u[k] - c[k]) / opt.eps;
        const double left = (c[k] - d[k]) / opt.eps;
        if (std::abs(right - left) > 1e-7 * std::max(1.0, std::abs(right) + std::abs(left))) kink = true;
      }
      if (kink) {
        ++out.kinks;
        continue;
      }
      for (int k = 0; k < 4; ++k) {
        numeric[static_cast<std::size_t>(k)].push_back((u[k] - d[k]) / (2.0 * opt.eps));
        kept_analytic[static_cast<std::size_t>(k)].push_back(analytic[static_cast<std::size_t>(k)][flat]);
      }
    }
  }
  for (int k = 0; k < 3; ++k)
    out.term_error[k] = gradient_rel_error(kept_analytic[static_cast<std::size_t>(k)], numeric[static_cast<std::size_t>(k)]);
  out.total_error = gradient_rel_error(kept_analytic[3], numeric[3]);
  out.max_rel_error = std::max({out.term_error[0], out.term_error[1], out.term_error[2], out.total_error});
  return out;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  if (opt.draws < 1) throw ContractError("gradcheck: need at least one draw");
  if (opt.batch < 1) throw ContractError("gradcheck: batch must be >= 1");
  GradcheckReport rep;
  rep.env = opt.env;
  rep.tolerance = opt.tolerance;
  for (int d = 0; d < opt.draws; ++d) {
    const GradcheckDraw r = gradcheck_draw(opt, derive_seed(opt.seed, {static_cast<std::uint64_t>(opt.env), static_cast<std::uint64_t>(d)}));
    ++rep.draws;
    rep.max_rel_error = std::max(rep.max_rel_error, r.max_rel_error);
    for (int k = 0; k < 3; ++k) rep.max_term_error[k] = std::max(rep.max_term_error[k], r.term_error[k]);
    rep.max_total_error = std::max(rep.max_total_error, r.total_error);
    rep.coordinates += r.coordinates;
    rep.kinks += r.kinks;
  }
  return rep;
}

}  // namespace cam
