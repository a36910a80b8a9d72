#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "cam/gradcheck.hpp"
#include "cam/trainer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace cam {
namespace {

using testing::id_chain;
using testing::StateTableScorer;

constexpr Label A = Label::kAdmissible;
constexpr Label D = Label::kInadmissible;

WorldState two_cars(double gap) {
  WorldState w;
  w.env = EnvKind::kCar;
  w.map_side = 3.0;
  Eigen::VectorXd s(4);
  s << 0.0, 0.0, 0.0, 0.0;
  w.agents.push_back(s);
  s[0] = gap;
  w.agents.push_back(s);
  w.goals = {Eigen::Vector3d(2, 2, 0), Eigen::Vector3d(-2, -2, 0)};
  w.reached.assign(2, 0);
  return w;
}

TEST(LabelTransition, CollisionAtSuccessorIsInadmissible) {
  EXPECT_EQ(label_transition(two_cars(0.2), 0), Label::kInadmissible);
  EXPECT_EQ(label_transition(two_cars(1.0), 0), Label::kAdmissible);
}

TEST(LabelTransition, GoalDoesNotOverrideCollision) {
  WorldState w = two_cars(0.2);
  w.goals[0] = Eigen::Vector3d(0, 0, 0);
  ASSERT_TRUE(check_goal(w.env, w.agents[0], w.goals[0]));
  EXPECT_EQ(label_transition(w, 0), Label::kInadmissible);
}

TEST(Relabel, CascadesWhenSuccessorsHaveNoAdmissibleAction) {
  auto chain = id_chain({A, A, D});
  const StateTableScorer phi{{0.3, -0.1, -0.2}};
  Rng rng(1);
  EXPECT_EQ(relabel_episode(phi, std::span<Transition>(chain), EnvKind::kIntegrator, 16, rng), 2);
  for (const auto& t : chain) EXPECT_EQ(t.label, D);
  EXPECT_TRUE(chain[0].relabeled);
  EXPECT_TRUE(chain[1].relabeled);
  EXPECT_FALSE(chain[2].relabeled);
}

TEST(Relabel, StopsWhenSuccessorHasAnAdmissibleAction) {
  auto chain = id_chain({A, A, D});
  const StateTableScorer phi{{-0.3, -0.1, 0.0}};
  Rng rng(1);
  EXPECT_EQ(relabel_episode(phi, std::span<Transition>(chain), EnvKind::kIntegrator, 16, rng), 0);
  EXPECT_EQ(chain[0].label, A);
  EXPECT_EQ(chain[1].label, A);
}

TEST(Relabel, CollisionFreeEpisodeIsUntouched) {
  auto chain = id_chain({A, A, A, A});
  const StateTableScorer phi{{-1, -1, -1, -1}};
  Rng rng(1);
  EXPECT_EQ(relabel_episode(phi, std::span<Transition>(chain), EnvKind::kIntegrator, 16, rng), 0);
}

TEST(Relabel, RequiresProbes) {
  auto chain = id_chain({A, D});
  Rng rng(1);
  EXPECT_THROW(relabel_episode(StateTableScorer{{0, 0}}, std::span<Transition>(chain), EnvKind::kIntegrator, 0, rng),
               ContractError);
}

TEST(Relabel, MatchesClosedFormReferenceOnRandomEpisodes) {
  Rng rng(2024);
  int total_flips = 0;
  for (int episode = 0; episode < 1000; ++episode) {
    const int n = 1 + static_cast<int>(rng() % 40);
    const double p_collision = uniform(rng, 0.0, 0.3);
    const double p_negative = uniform(rng, 0.0, 1.0);
    std::vector<Label> labels;
    StateTableScorer phi;
    for (int t = 0; t < n; ++t) {
      labels.push_back(uniform(rng, 0.0, 1.0) < p_collision ? D : A);
      phi.phi.push_back(uniform(rng, 0.0, 1.0) < p_negative ? -uniform(rng, 1e-6, 1.0) : uniform(rng, 0.0, 1.0));
    }
    auto chain = id_chain(labels);
    Rng probe(static_cast<std::uint64_t>(episode));
    const int count = relabel_episode(phi, std::span<Transition>(chain), EnvKind::kIntegrator, 8, probe);
    const auto ref = testing::relabel_reference(labels, phi.phi);
    ASSERT_EQ(count, ref.flips) << "episode " << episode;
    total_flips += count;
    for (int t = 0; t < n; ++t) {
      ASSERT_EQ(chain[static_cast<std::size_t>(t)].label, ref.labels[static_cast<std::size_t>(t)]) << "episode " << episode;
      ASSERT_EQ(chain[static_cast<std::size_t>(t)].relabeled, labels[static_cast<std::size_t>(t)] != ref.labels[static_cast<std::size_t>(t)]);
    }
  }
  EXPECT_GT(total_flips, 500);
}

// phi(x, a) = relu(a_x) on the integrator, so phi can be set through the action.
CamModel relu_ax_model() {
  CamModel m = CamModel::create({Backbone::kMlp, EnvKind::kIntegrator, 1, 1}, 0);
  m.head[0].weight.value << 0, 0, 1, 0;
  m.head[0].bias.value.setZero();
  m.head[1].weight.value << 1;
  m.head[1].bias.value.setZero();
  return m;
}

Transition at_phi(double phi, Label label, std::optional<double> next_phi = std::nullopt) {
  Transition t;
  t.state = std::make_shared<const Observation>(RawState{Eigen::Vector2d(0.0, 0.0)});
  t.action = Eigen::Vector2d(phi, 0.0);
  t.label = label;
  t.next_state = t.state;
  if (next_phi) t.next_action = Eigen::VectorXd(Eigen::Vector2d(*next_phi, 0.0));
  return t;
}

LossTerms tape_terms(CamModel& m, const std::vector<Transition>& data, const LossWeights& w) {
  std::vector<const Transition*> batch;
  for (const auto& t : data) batch.push_back(&t);
  diff::Tape tape;
  const LossVars v = cam_loss(tape, m, batch, w);
  return {tape.scalar(v.admissible), tape.scalar(v.inadmissible), tape.scalar(v.invariance)};
}

TEST(CamLoss, ExamplesPerTerm) {
  CamModel m = relu_ax_model();
  const LossWeights w{0.0, 0.02, 0.01, 0.1};
  const LossTerms adm = tape_terms(m, {at_phi(0.5, A)}, w);
  EXPECT_DOUBLE_EQ(adm.admissible, 0.0);
  const LossTerms inadm = tape_terms(m, {at_phi(0.5, D)}, w);
  EXPECT_NEAR(inadm.inadmissible, 0.52, 1e-15);
  const LossTerms inv = tape_terms(m, {at_phi(0.1, A, 0.05)}, w);
  EXPECT_NEAR(inv.invariance, 0.05, 1e-15);
  EXPECT_NEAR(inv.total(), 0.05, 1e-15);
}

TEST(CamLoss, EmptyPartitionsContributeZero) {
  CamModel m = relu_ax_model();
  const LossWeights w{0.1, 0.02, 0.01, 0.1};
  const LossTerms only_adm = tape_terms(m, {at_phi(0.0, A)}, w);
  EXPECT_DOUBLE_EQ(only_adm.inadmissible, 0.0);
  EXPECT_DOUBLE_EQ(only_adm.invariance, 0.0);  // no successor action
  EXPECT_NEAR(only_adm.admissible, 0.1, 1e-15);
  const LossTerms only_inadm = tape_terms(m, {at_phi(0.0, D, 0.3)}, w);
  EXPECT_DOUBLE_EQ(only_inadm.admissible, 0.0);
  EXPECT_DOUBLE_EQ(only_inadm.invariance, 0.0);  // successor terms use admissible pairs only
}

TEST(CamLoss, TapeAndPlainPathsAgree) {
  Rng rng(5);
  for (EnvKind env : {EnvKind::kCar, EnvKind::kDrone, EnvKind::kIntegrator}) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto data = random_transitions(env, 16, rng);
      std::vector<const Transition*> batch;
      for (const auto& t : data) batch.push_back(&t);
      CamModel m = CamModel::create({is_graph_env(env) ? Backbone::kGnn : Backbone::kMlp, env, 8, 2}, rng());
      const LossWeights w{0.01, 0.02, 0.01, 0.1};
      diff::Tape tape;
      const LossVars v = cam_loss(tape, m, batch, w);
      const LossTerms plain = cam_loss_value(m, batch, w);
      EXPECT_NEAR(tape.scalar(v.admissible), plain.admissible, 1e-12);
      EXPECT_NEAR(tape.scalar(v.inadmissible), plain.inadmissible, 1e-12);
      EXPECT_NEAR(tape.scalar(v.invariance), plain.invariance, 1e-12);
    }
  }
}

TEST(CamLoss, NonNegativeAndZeroExactlyWhenAllMarginsHold) {
  Rng rng(6);
  int zero_cases = 0;
  for (int trial = 0; trial < 300; ++trial) {
    CamModel m = relu_ax_model();
    m.head[1].bias.value << uniform(rng, -0.1, 0.1);
    std::vector<Transition> data;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) {
      const Label y = uniform(rng, 0.0, 1.0) < 0.7 ? A : D;
      std::optional<double> next;
      if (uniform(rng, 0.0, 1.0) < 0.5) next = uniform(rng, -1.0, 1.0);
      data.push_back(at_phi(uniform(rng, -1.0, 1.0), y, next));
    }
    const LossWeights w{uniform(rng, 0.0, 0.05), uniform(rng, 0.0, 0.05), uniform(rng, 0.0, 0.05), 0.1};
    const LossTerms terms = tape_terms(m, data, w);
    EXPECT_GE(terms.admissible, 0.0);
    EXPECT_GE(terms.inadmissible, 0.0);
    EXPECT_GE(terms.invariance, 0.0);
    bool all_hold = true;
    for (const auto& t : data) {
      const double phi = m.score_batch(*t.state, t.action.transpose())[0];
      if (t.label == D) {
        all_hold = all_hold && w.gamma2 + phi <= 0.0;
        continue;
      }
      all_hold = all_hold && w.gamma1 - phi <= 0.0;
      if (t.next_action) {
        const double phi_next = m.score_batch(*t.next_state, t.next_action->transpose())[0];
        all_hold = all_hold && w.gamma3 - (phi_next - phi) - w.lambda * phi <= 0.0;
      }
    }
    EXPECT_EQ(terms.total() == 0.0, all_hold) << "trial " << trial;
    zero_cases += all_hold;
  }
  EXPECT_GT(zero_cases, 0);
}

TEST(CamLoss, GradientMatchesFiniteDifferencesOnSixteenTransitionBatches) {
  for (EnvKind env : {EnvKind::kCar, EnvKind::kDynDubins, EnvKind::kDrone, EnvKind::kIntegrator, EnvKind::kDubinsSingle}) {
    GradcheckOptions o;
    o.env = env;
    o.draws = 5;
    o.batch = 16;
    const GradcheckReport r = run_gradcheck(o);
    EXPECT_LT(r.max_rel_error, 1e-5) << to_string(env);
    EXPECT_LT(r.kinks, r.coordinates / 20) << to_string(env);
  }
}

TEST(CamLoss, GradcheckDetectsCorruptedGradient) {
  GradcheckOptions o;
  o.env = EnvKind::kCar;
  o.draws = 2;
  o.corrupt = true;
  EXPECT_FALSE(run_gradcheck(o).passed());
}

TEST(CamLoss, SeparableSetIsFittedWithinFiveHundredSteps) {
  Rng rng(7);
  std::vector<Transition> data;
  for (int i = 0; i < 64; ++i) {
    const bool safe = i % 2 == 0;
    Transition t;
    t.state = std::make_shared<const Observation>(RawState{Eigen::Vector2d(uniform(rng, -1, 1), uniform(rng, -1, 1))});
    const double ay = safe ? uniform(rng, 0.2, 1.0) : uniform(rng, -1.0, -0.2);
    t.action = Eigen::Vector2d(uniform(rng, -1, 1), ay);
    t.label = safe ? A : D;
    data.push_back(t);
  }
  std::vector<const Transition*> batch;
  for (const auto& t : data) batch.push_back(&t);
  CamModel m = CamModel::create({Backbone::kMlp, EnvKind::kIntegrator, 16, 2}, 3);
  diff::AdamState adam;
  const LossWeights w{0.0, 0.02, 0.01, 0.1};
  for (int step = 0; step < 500; ++step) gradient_step(m, adam, batch, w);
  EXPECT_LT(cam_loss_value(m, std::span<const Transition* const>(batch), w).total(), 1e-3);
}

TEST(GradientStep, NonFiniteLossIsANumericError) {
  CamModel m = relu_ax_model();
  m.head[1].bias.value << std::numeric_limits<double>::quiet_NaN();
  std::vector<Transition> data{at_phi(0.5, D)};
  std::vector<const Transition*> batch{&data[0]};
  diff::AdamState adam;
  EXPECT_THROW(gradient_step(m, adam, batch, {}), NumericError);
}

Transition numbered(int step) {
  Transition t;
  t.step = step;
  return t;
}

TEST(ReplayBuffer, EvictsOldestFirst) {
  ReplayBuffer buf(5);
  for (int i = 0; i < 8; ++i) buf.push(numbered(i));
  ASSERT_EQ(buf.size(), 5u);
  for (std::size_t k = 0; k < buf.size(); ++k) EXPECT_EQ(buf[k].step, static_cast<int>(k) + 3);
  EXPECT_THROW(ReplayBuffer(0), ContractError);
}

TEST(ReplayBuffer, SmallBufferSamplesWithReplacement) {
  ReplayBuffer buf(100);
  for (int i = 0; i < 3; ++i) buf.push(numbered(i));
  Rng rng(1);
  const auto batch = buf.sample(10, rng);
  EXPECT_EQ(batch.size(), 10u);
}

TEST(ReplayBuffer, LargeBufferSamplesDistinctTransitions) {
  ReplayBuffer buf(100);
  for (int i = 0; i < 50; ++i) buf.push(numbered(i));
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = buf.sample(50, rng);
    std::sort(batch.begin(), batch.end());
    EXPECT_EQ(std::adjacent_find(batch.begin(), batch.end()), batch.end());
  }
}

TaskSpec small_car_task() {
  TaskSpec t;
  t.env = EnvKind::kCar;
  t.agents = 2;
  t.obstacles = 1;
  t.map_side = 3.0;
  t.horizon = 12;
  return t;
}

TrainConfig tiny_config() {
  TrainConfig c = default_train_config(EnvKind::kCar);
  c.candidates = 16;
  c.episodes = 6;
  c.update_every = 2;
  c.gradient_steps = 2;
  c.batch_size = 8;
  c.validation_interval = 1;
  c.validation_episodes = 1;
  c.seed = 17;
  return c;
}

TEST(Train, ZeroEpisodesReturnsTheInitialModel) {
  TrainConfig c = tiny_config();
  c.episodes = 0;
  const ModelShape shape{Backbone::kGnn, EnvKind::kCar, 8, 2};
  std::vector<std::string> tags;
  TrainHooks hooks;
  hooks.checkpoint = [&](const CamModel&, const std::string& tag) { tags.push_back(tag); };
  const TrainResult r = train(shape, small_car_task(), c, hooks);
  const CamModel fresh = CamModel::create(shape, c.seed);
  const auto a = r.model.parameters(), b = fresh.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
  EXPECT_TRUE(r.telemetry.empty());
  EXPECT_EQ(tags, std::vector<std::string>{"final"});
}

TEST(Train, SameSeedGivesIdenticalTelemetryAndWeights) {
  const ModelShape shape{Backbone::kGnn, EnvKind::kCar, 8, 2};
  std::ostringstream log_a, log_b;
  TrainHooks ha, hb;
  ha.telemetry = &log_a;
  hb.telemetry = &log_b;
  const TrainResult a = train(shape, small_car_task(), tiny_config(), ha);
  const TrainResult b = train(shape, small_car_task(), tiny_config(), hb);
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_FALSE(log_a.str().empty());
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
  EXPECT_EQ(a.updates, 3);
}

TEST(Train, TelemetryCarriesWindowRelabelsAndRatio) {
  TrainConfig c = tiny_config();
  c.episodes = 25;
  c.gradient_steps = 1;
  std::vector<std::string> tags;
  TrainHooks hooks;
  hooks.checkpoint = [&](const CamModel&, const std::string& tag) { tags.push_back(tag); };
  const TrainResult r = train({Backbone::kGnn, EnvKind::kCar, 8, 2}, small_car_task(), c, hooks);
  ASSERT_EQ(r.telemetry.size(), 25u);
  for (std::size_t e = 0; e < r.telemetry.size(); ++e) {
    const auto& row = r.telemetry[e];
    const std::size_t lo = e >= 19 ? e - 19 : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= e; ++k) s += r.telemetry[k].success;
    EXPECT_NEAR(row.success_window, s / static_cast<double>(e - lo + 1), 1e-12);
    EXPECT_GE(row.admissible_ratio, 0.0);
    EXPECT_LE(row.admissible_ratio, 1.0);
    const auto j = row.to_json();
    for (const char* key : {"episode", "success_window", "relabel_count", "admissible_ratio", "loss", "lr"})
      EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(tags.front(), "update_1");
  EXPECT_EQ(tags.back(), "final");
}

TEST(Train, RejectsInvalidConfig) {
  TrainConfig c = tiny_config();
  c.gamma2 = -0.1;
  EXPECT_THROW(train({Backbone::kGnn, EnvKind::kCar, 8, 2}, small_car_task(), c), ConfigError);
  c = tiny_config();
  c.candidates = 0;
  EXPECT_THROW(train({Backbone::kGnn, EnvKind::kCar, 8, 2}, small_car_task(), c), ConfigError);
}

TEST(Rollout, ZeroAgentTaskIsEmpty) {
  TaskSpec t = small_car_task();
  t.agents = 0;
  const CamModel m = CamModel::create({Backbone::kGnn, EnvKind::kCar, 8, 2}, 1);
  RolloutOptions o;
  o.candidates = 8;
  const EpisodeResult r = run_episode(m, sample_task(t), t.horizon, o);
  EXPECT_EQ(r.ticks, 0);
  EXPECT_TRUE(r.agents.empty());
}

TEST(Rollout, AgentStartingAtGoalFinishesAfterOneTick) {
  TaskSpec t;
  t.env = EnvKind::kIntegrator;
  t.agents = 1;
  t.obstacles = 0;
  t.map_side = 6.0;
  t.layout.goal = t.layout.start;
  CamModel m = relu_ax_model();
  m.head[1].weight.value << 0;
  m.head[1].bias.value << 1;  // everything admissible
  RolloutOptions o;
  o.candidates = 64;
  const EpisodeResult r = run_episode(m, sample_task(t), 50, o);
  EXPECT_EQ(r.ticks, 1);
  EXPECT_EQ(success_rate(r), 1.0);
}

TEST(Rollout, FixedSeedIsBitIdentical) {
  const CamModel m = CamModel::create({Backbone::kGnn, EnvKind::kCar, 8, 2}, 2);
  TaskSpec t = small_car_task();
  t.agents = 4;
  t.seed = 9;
  RolloutOptions o;
  o.candidates = 32;
  o.noise_fraction = 0.1;
  o.keep_log = true;
  o.seed = 123;
  const EpisodeResult a = run_episode(m, sample_task(t), t.horizon, o);
  const EpisodeResult b = run_episode(m, sample_task(t), t.horizon, o);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t k = 0; k < a.log.size(); ++k) {
    EXPECT_EQ(a.log[k].state, b.log[k].state);
    EXPECT_EQ(a.log[k].action, b.log[k].action);
  }
}

TEST(BuildChain, SuccessorLinksFollowTheChain) {
  const CamModel m = CamModel::create({Backbone::kGnn, EnvKind::kCar, 8, 2}, 2);
  TaskSpec t = small_car_task();
  RolloutOptions o;
  o.candidates = 16;
  o.keep_observations = true;
  const EpisodeResult r = run_episode(m, sample_task(t), t.horizon, o);
  for (int a = 0; a < 2; ++a) {
    const auto chain = build_chain(r, a, 0);
    ASSERT_FALSE(chain.empty());
    for (std::size_t k = 0; k + 1 < chain.size(); ++k) {
      EXPECT_EQ(chain[k].next_state, chain[k + 1].state);
      ASSERT_TRUE(chain[k].next_action);
      EXPECT_EQ(*chain[k].next_action, chain[k + 1].action);
    }
    EXPECT_FALSE(chain.back().next_action);
    EXPECT_TRUE(chain.back().next_state);
  }
}

}  // namespace
}  // namespace cam
