#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "cam/diffcore.hpp"
#include "test_support.hpp"

namespace cam::diff {
namespace {

using cam::testing::random_matrix;
using cam::testing::relative_error;

Dense layer(std::initializer_list<std::initializer_list<double>> w, std::initializer_list<double> b, Activation act) {
  const std::size_t out = w.size();
  const std::size_t in = w.begin()->size();
  Dense d{ParamTensor("w", {out, in}), ParamTensor("b", {out}), act};
  int r = 0;
  for (auto row : w) {
    int c = 0;
    for (double v : row) d.weight.value(r, c++) = v;
    ++r;
  }
  int i = 0;
  for (double v : b) d.bias.value(0, i++) = v;
  return d;
}

TEST(ForwardMlp, IdentityLayer) {
  std::vector<Dense> l{layer({{1, 0}, {0, 1}}, {0, 0}, Activation::kNone)};
  Eigen::VectorXd out = forward_mlp(l, Eigen::Vector2d(3, -2));
  EXPECT_EQ(out, Eigen::Vector2d(3, -2));
}

TEST(ForwardMlp, IdentityWithRelu) {
  std::vector<Dense> l{layer({{1, 0}, {0, 1}}, {0, 0}, Activation::kRelu)};
  EXPECT_EQ(forward_mlp(l, Eigen::Vector2d(3, -2)), Eigen::Vector2d(3, 0));
}

TEST(ForwardMlp, TwoLayersByHand) {
  std::vector<Dense> l{layer({{2}}, {1}, Activation::kRelu), layer({{-1}}, {0}, Activation::kNone)};
  EXPECT_EQ(forward_mlp(l, Eigen::VectorXd::Constant(1, 1.0))[0], -3.0);
}

TEST(ForwardMlp, ShapeErrorNamesLayer) {
  std::vector<Dense> l{layer({{1, 0}, {0, 1}}, {0, 0}, Activation::kRelu), layer({{1, 2, 3}}, {0}, Activation::kNone)};
  try {
    forward_mlp(l, Eigen::Vector2d(1, 1));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(ForwardMlp, TapeMatchesPlainForward) {
  Rng rng(3);
  auto layers = make_mlp("m", {5, 7, 3}, Activation::kRelu, Activation::kNone, rng);
  Matrix x = random_matrix(rng, 4, 5);
  Tape tape;
  Var y = forward_mlp(tape, layers, tape.constant(x));
  EXPECT_LT((tape.value(y) - forward_mlp_batch(layers, x)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Backward, SquareGradient) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 3.0;
  Tape tape;
  tape.backward(tape.squared_norm(tape.param(w)));
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 6.0);
}

TEST(Backward, InactiveRelu) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 3.0;
  Tape tape;
  tape.backward(tape.sum(tape.relu(tape.scale(tape.param(w), -1.0))));
  EXPECT_EQ(w.grad(0, 0), 0.0);
}

TEST(Backward, MaxRoutesToArgmax) {
  ParamTensor w("w", {2});
  w.value << 2.0, 5.0;
  Tape tape;
  tape.backward(tape.reduce_max(tape.param(w)));
  EXPECT_EQ(w.grad(0, 0), 0.0);
  EXPECT_EQ(w.grad(0, 1), 1.0);
}

TEST(Backward, MaxTieGoesToLowestIndex) {
  ParamTensor w("w", {3});
  w.value << 4.0, 4.0, 1.0;
  Tape tape;
  tape.backward(tape.scale(tape.reduce_max(tape.param(w)), 2.5));
  EXPECT_EQ(w.grad(0, 0), 2.5);
  EXPECT_EQ(w.grad(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(w.grad.sum(), 2.5);  // one-hot routing conserves the incoming gradient
}

TEST(Backward, SegmentMaxTiesAndEmptySegments) {
  ParamTensor w("w", {3, 2});
  w.value << 1.0, 7.0, 1.0, 3.0, 9.0, 0.0;
  Tape tape;
  Var s = tape.segment_max(tape.param(w), {0, 0, 2}, 3);
  EXPECT_EQ(tape.value(s).row(1), Eigen::RowVector2d(0, 0));
  tape.backward(tape.sum(s));
  Matrix expected(3, 2);
  expected << 1, 1, 0, 0, 1, 1;
  EXPECT_EQ(w.grad, expected);
}

TEST(Backward, NonScalarLossIsContractError) {
  ParamTensor w("w", {2});
  Tape tape;
  EXPECT_THROW(tape.backward(tape.param(w)), ContractError);
}

TEST(Backward, SharedParamBoundOnce) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 2.0;
  Tape tape;
  Var a = tape.param(w);
  Var b = tape.param(w);
  EXPECT_EQ(a.id, b.id);
  tape.backward(tape.sum(tape.add(a, b)));
  EXPECT_EQ(w.grad(0, 0), 2.0);
}

TEST(FiniteDiff, QuadraticIsExact) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 3.0;
  std::vector<ParamTensor*> ps{&w};
  auto g = finite_diff_grad([&] { return w.value(0, 0) * w.value(0, 0); }, ps, 1e-4);
  EXPECT_NEAR(g[0](0, 0), 6.0, 1e-7);
  EXPECT_EQ(w.value(0, 0), 3.0);
}

TEST(FiniteDiff, ConstantGivesZero) {
  ParamTensor w("w", {2, 2});
  w.value.setRandom();
  std::vector<ParamTensor*> ps{&w};
  auto g = finite_diff_grad([] { return 4.2; }, ps, 1e-4);
  EXPECT_EQ(g[0].cwiseAbs().maxCoeff(), 0.0);
}

TEST(FiniteDiff, NonFiniteLossIsNumericError) {
  ParamTensor w("w", {1});
  std::vector<ParamTensor*> ps{&w};
  EXPECT_THROW(finite_diff_grad([] { return std::nan(""); }, ps, 1e-4), NumericError);
  EXPECT_THROW(finite_diff_grad([] { return 0.0; }, ps, 0.0), ContractError);
}

// Each primitive, composed with a squared norm so upstream gradients are
// non-trivial, checked against central differences over random draws.
TEST(BackwardProperty, PrimitivesMatchFiniteDifferences) {
  using Build = std::function<Var(Tape&, Var, Var, Var)>;
  struct Case {
    const char* name;
    int ar, ac, br, bc, cr, cc;
    Build build;
  };
  const std::vector<Case> cases{
      {"matmul", 3, 4, 4, 2, 1, 1, [](Tape& t, Var a, Var b, Var) { return t.matmul(a, b); }},
      {"linear", 5, 3, 2, 3, 1, 2, [](Tape& t, Var a, Var b, Var c) { return t.linear(a, b, c); }},
      {"add", 3, 3, 3, 3, 1, 1, [](Tape& t, Var a, Var b, Var) { return t.add(a, b); }},
      {"sub", 3, 3, 3, 3, 1, 1, [](Tape& t, Var a, Var b, Var) { return t.sub(a, b); }},
      {"scale", 2, 5, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.scale(a, -1.7, 0.3); }},
      {"relu", 4, 4, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.relu(a); }},
      {"concat", 3, 2, 3, 4, 1, 1, [](Tape& t, Var a, Var b, Var) { return t.concat_cols(a, b); }},
      {"gather", 4, 3, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.gather_rows(a, {3, 0, 3, 1}); }},
      {"segment_max", 6, 3, 1, 1, 1, 1,
       [](Tape& t, Var a, Var, Var) { return t.segment_max(a, {0, 2, 0, 2, 2, 0}, 4); }},
      {"reduce_max", 3, 3, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.reduce_max(a); }},
      {"reduce_min", 3, 3, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.reduce_min(a); }},
      {"sum", 3, 3, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.sum(a); }},
      {"mean", 3, 5, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.mean(a); }},
      {"squared_norm", 2, 3, 1, 1, 1, 1, [](Tape& t, Var a, Var, Var) { return t.squared_norm(a); }},
  };
  Rng rng(11);
  for (const Case& c : cases) {
    double worst = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
      ParamTensor a("a", {std::size_t(c.ar), std::size_t(c.ac)});
      ParamTensor b("b", {std::size_t(c.br), std::size_t(c.bc)});
      ParamTensor bias("c", {std::size_t(c.cr), std::size_t(c.cc)});
      a.value = random_matrix(rng, c.ar, c.ac);
      b.value = random_matrix(rng, c.br, c.bc);
      bias.value = random_matrix(rng, c.cr, c.cc);
      auto loss = [&](Tape& t) {
        return t.squared_norm(t.scale(c.build(t, t.param(a), t.param(b), t.param(bias)), 1.0, 0.25));
      };
      std::vector<ParamTensor*> ps{&a, &b, &bias};
      Tape tape;
      tape.backward(loss(tape));
      std::vector<Matrix> analytic{a.grad, b.grad, bias.grad};
      auto numeric = finite_diff_grad([&] {
        Tape t;
        return t.scalar(loss(t));
      }, ps, 1e-4);
      worst = std::max(worst, relative_error(analytic, numeric));
    }
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

TEST(BackwardProperty, EmptyBatchPropagates) {
  ParamTensor w("w", {2, 3});
  ParamTensor b("b", {2});
  w.value.setOnes();
  Tape tape;
  Var y = tape.linear(tape.constant(Matrix(0, 3)), tape.param(w), tape.param(b));
  Var loss = tape.add(tape.mean(y), tape.sum(tape.param(b)));
  tape.backward(loss);
  EXPECT_EQ(w.grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(b.grad, Matrix::Ones(1, 2));
}

TEST(Tape, ReplayIsBitIdentical) {
  Rng rng(5);
  auto layers = make_mlp("m", {3, 16, 16, 1}, Activation::kRelu, Activation::kNone, rng);
  Matrix x = random_matrix(rng, 32, 3);
  auto run = [&] {
    Tape t;
    Var y = forward_mlp(t, layers, t.constant(x));
    for (auto& l : layers) {
      l.weight.zero_grad();
      l.bias.zero_grad();
    }
    t.backward(t.squared_norm(y));
    return std::make_pair(Matrix(t.value(y)), Matrix(layers[0].weight.grad));
  };
  auto [y1, g1] = run();
  auto [y2, g2] = run();
  EXPECT_TRUE((y1.array() == y2.array()).all());
  EXPECT_TRUE((g1.array() == g2.array()).all());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 0.5;
  w.grad(0, 0) = 1.0;
  AdamState st;
  st.lr = 1e-3;
  std::vector<ParamTensor*> ps{&w};
  adam_update(ps, st);
  EXPECT_NEAR(0.5 - w.value(0, 0), 1e-3 / (1.0 + 1e-8), 1e-8);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Rng rng(2);
  ParamTensor w("w", {3, 4});
  w.value = random_matrix(rng, 3, 4);
  const Matrix before = w.value;
  AdamState st;
  std::vector<ParamTensor*> ps{&w};
  for (int i = 0; i < 5; ++i) adam_update(ps, st);
  EXPECT_TRUE((w.value.array() == before.array()).all());
}

TEST(Adam, TwoStepsMatchHandUnrolledRecurrence) {
  ParamTensor w("w", {1});
  w.value(0, 0) = 1.0;
  AdamState st;
  st.lr = 0.01;
  std::vector<ParamTensor*> ps{&w};
  const double g = 0.3;
  // Hand unrolling with constant g.
  double m = 0, v = 0, x = 1.0;
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    w.grad(0, 0) = g;
    adam_update(ps, st);
  }
  EXPECT_NEAR(w.value(0, 0), x, 1e-15);
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParamTensor w("layer.weight", {1});
  w.grad(0, 0) = std::numeric_limits<double>::infinity();
  AdamState st;
  std::vector<ParamTensor*> ps{&w};
  try {
    adam_update(ps, st);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
}

TEST(Plateau, HalvesAfterPatienceRounds) {
  AdamState st;
  st.patience = 2;
  st.lr = 1e-3;
  st.min_lr = 1e-5;
  lr_plateau_step(st, 0.5);
  lr_plateau_step(st, 0.5);
  EXPECT_EQ(st.lr, 1e-3);
  lr_plateau_step(st, 0.5);
  EXPECT_DOUBLE_EQ(st.lr, 5e-4);
}

TEST(Plateau, ImprovingMetricKeepsRate) {
  AdamState st;
  st.patience = 1;
  for (double m : {0.1, 0.2, 0.3, 0.4}) lr_plateau_step(st, m);
  EXPECT_EQ(st.lr, 1e-3);
}

TEST(Plateau, NeverBelowMinimum) {
  AdamState st;
  st.patience = 1;
  st.lr = 1e-5;
  st.min_lr = 1e-5;
  for (int i = 0; i < 5; ++i) lr_plateau_step(st, 0.0);
  EXPECT_EQ(st.lr, 1e-5);
}

}  // namespace
}  // namespace cam::diff
