#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices, the
// dense/MLP layer type built on it, and the Adam optimizer with a plateau
// learning-rate schedule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cam/error.hpp"
#include "cam/random.hpp"

namespace cam::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor. One-dimensional tensors are stored as a single row.
class ParamTensor {
 public:
  ParamTensor() = default;
  ParamTensor(std::string name, std::vector<std::size_t> shape) : name_(std::move(name)), shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 2) throw ShapeError("ParamTensor '" + name_ + "': rank must be 1 or 2");
    for (auto d : shape_)
      if (d == 0) throw ShapeError("ParamTensor '" + name_ + "': dimensions must be positive");
    const auto rows = shape_.size() == 2 ? static_cast<Eigen::Index>(shape_[0]) : 1;
    const auto cols = static_cast<Eigen::Index>(shape_.back());
    value = Matrix::Zero(rows, cols);
    grad = Matrix::Zero(rows, cols);
  }

  const std::string& name() const { return name_; }
  const std::vector<std::size_t>& shape() const { return shape_; }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }

  Matrix value;
  Matrix grad;

 private:
  std::string name_;
  std::vector<std::size_t> shape_;
};

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
};

class Tape {
 public:
  enum class Op {
    kConstant,
    kParam,
    kMatMul,
    kLinear,
    kAdd,
    kSub,
    kScale,
    kRelu,
    kConcatCols,
    kGatherRows,
    kSegmentMax,
    kReduceMax,
    kReduceMin,
    kSum,
    kMean,
    kSquaredNorm,
  };

  Var constant(Matrix value) { return push(Op::kConstant, std::move(value)); }

  /// Binds a parameter as a leaf. Binding the same tensor twice yields the same node.
  Var param(ParamTensor& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
    Var v = push(Op::kParam, p.value);
    nodes_.back().param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  const Matrix& value(Var v) const { return node(v).value; }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw ContractError("Tape::scalar: node is not 1x1");
    return m(0, 0);
  }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return node(v).op; }

  Var matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.rows()) throw ShapeError(shape_msg("matmul", A, B));
    Matrix out = A * B;
    return push(Op::kMatMul, std::move(out), a, b);
  }

  /// x * W^T + b with x: batch x in, W: out x in, b: 1 x out.
  Var linear(Var x, Var w, Var b) {
    const Matrix& X = value(x);
    const Matrix& W = value(w);
    const Matrix& B = value(b);
    if (X.cols() != W.cols() || B.rows() != 1 || B.cols() != W.rows())
      throw ShapeError(shape_msg("linear", X, W));
    Matrix out(X.rows(), W.rows());
    out.noalias() = X * W.transpose();
    out.rowwise() += B.row(0);
    return push(Op::kLinear, std::move(out), x, w, b);
  }

  Var add(Var a, Var b) {
    check_same("add", a, b);
    return push(Op::kAdd, value(a) + value(b), a, b);
  }

  Var sub(Var a, Var b) {
    check_same("sub", a, b);
    return push(Op::kSub, value(a) - value(b), a, b);
  }

  /// alpha * a + beta, elementwise.
  Var scale(Var a, double alpha, double beta = 0.0) {
    Matrix out = (alpha * value(a)).array() + beta;
    Var v = push(Op::kScale, std::move(out), a);
    nodes_.back().alpha = alpha;
    return v;
  }

  Var relu(Var a) { return push(Op::kRelu, value(a).cwiseMax(0.0), a); }

  Var concat_cols(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.rows() != B.rows()) throw ShapeError(shape_msg("concat_cols", A, B));
    Matrix out(A.rows(), A.cols() + B.cols());
    out << A, B;
    return push(Op::kConcatCols, std::move(out), a, b);
  }

  Var gather_rows(Var a, std::vector<int> rows) {
    const Matrix& A = value(a);
    Matrix out(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= A.rows()) throw ShapeError("gather_rows: row index out of range");
      out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    Var v = push(Op::kGatherRows, std::move(out), a);
    nodes_.back().index = std::move(rows);
    return v;
  }

  /// Column-wise max over the rows that share a segment id. Segments with no
  /// rows produce zeros. Ties resolve to the lowest row index.
  Var segment_max(Var a, std::vector<int> segment, int segments) {
    const Matrix& A = value(a);
    if (static_cast<Eigen::Index>(segment.size()) != A.rows())
      throw ShapeError("segment_max: segment ids must match row count");
    Matrix out = Matrix::Zero(segments, A.cols());
    IndexMatrix arg = IndexMatrix::Constant(segments, A.cols(), -1);
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const int s = segment[static_cast<std::size_t>(r)];
      if (s < 0 || s >= segments) throw ShapeError("segment_max: segment id out of range");
      for (Eigen::Index c = 0; c < A.cols(); ++c) {
        if (arg(s, c) < 0 || A(r, c) > out(s, c)) {
          out(s, c) = A(r, c);
          arg(s, c) = static_cast<int>(r);
        }
      }
    }
    Var v = push(Op::kSegmentMax, std::move(out), a);
    nodes_.back().argmax = std::move(arg);
    return v;
  }

  Var reduce_max(Var a) { return reduce_extreme(a, Op::kReduceMax); }
  Var reduce_min(Var a) { return reduce_extreme(a, Op::kReduceMin); }

  Var sum(Var a) { return push(Op::kSum, Matrix::Constant(1, 1, value(a).sum()), a); }

  /// Mean of all elements; the mean of an empty matrix is defined as 0.
  Var mean(Var a) {
    const Matrix& A = value(a);
    const double m = A.size() == 0 ? 0.0 : A.sum() / static_cast<double>(A.size());
    return push(Op::kMean, Matrix::Constant(1, 1, m), a);
  }

  Var squared_norm(Var a) { return push(Op::kSquaredNorm, Matrix::Constant(1, 1, value(a).squaredNorm()), a); }

  /// Reverse sweep from a 1x1 loss. Parameter leaves accumulate into their
  /// ParamTensor::grad; intermediate gradients are discarded afterwards.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ContractError("backward: loss must be a 1x1 scalar node");
    std::vector<Matrix> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id)] = Matrix::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      Matrix& g = grads[static_cast<std::size_t>(id)];
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (g.size() == 0) {
        // Unreached, unless the node itself is empty (e.g. a batch with no edges).
        if (n.value.size() != 0) continue;
        g.resize(n.value.rows(), n.value.cols());
      }
      propagate(n, g, grads);
      g.resize(0, 0);
    }
  }

 private:
  struct Node {
    Op op = Op::kConstant;
    Matrix value;
    int in[3] = {-1, -1, -1};
    double alpha = 1.0;
    std::vector<int> index;
    IndexMatrix argmax;
    ParamTensor* param = nullptr;
  };

  Var push(Op op, Matrix value, Var a = {}, Var b = {}, Var c = {}) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.in[0] = a.id;
    n.in[1] = b.id;
    n.in[2] = c.id;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ContractError("Tape: invalid Var");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  void check_same(const char* op, Var a, Var b) const {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError(shape_msg(op, A, B));
  }

  static std::string shape_msg(const char* op, const Matrix& a, const Matrix& b) {
    return std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
           " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols());
  }

  Var reduce_extreme(Var a, Op op) {
    const Matrix& A = value(a);
    if (A.size() == 0) throw ShapeError("reduce over an empty matrix");
    int best = 0;
    const double* d = A.data();
    for (int i = 1; i < A.size(); ++i) {
      if (op == Op::kReduceMax ? d[i] > d[best] : d[i] < d[best]) best = i;
    }
    Var v = push(op, Matrix::Constant(1, 1, d[best]), a);
    nodes_.back().index = {best};
    return v;
  }

  static void accumulate(std::vector<Matrix>& grads, int id, const Matrix& g) {
    Matrix& dst = grads[static_cast<std::size_t>(id)];
    if (dst.size() == 0)
      dst = g;
    else
      dst += g;
  }

  void propagate(const Node& n, const Matrix& g, std::vector<Matrix>& grads) {
    switch (n.op) {
      case Op::kConstant:
        return;
      case Op::kParam:
        if (g.size() != 0) n.param->grad += g;
        return;
      case Op::kMatMul: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        const Matrix& B = nodes_[static_cast<std::size_t>(n.in[1])].value;
        accumulate(grads, n.in[0], g * B.transpose());
        accumulate(grads, n.in[1], A.transpose() * g);
        return;
      }
      case Op::kLinear: {
        const Matrix& X = nodes_[static_cast<std::size_t>(n.in[0])].value;
        const Matrix& W = nodes_[static_cast<std::size_t>(n.in[1])].value;
        accumulate(grads, n.in[0], g * W);
        accumulate(grads, n.in[1], g.transpose() * X);
        accumulate(grads, n.in[2], g.colwise().sum());
        return;
      }
      case Op::kAdd:
        accumulate(grads, n.in[0], g);
        accumulate(grads, n.in[1], g);
        return;
      case Op::kSub:
        accumulate(grads, n.in[0], g);
        accumulate(grads, n.in[1], -g);
        return;
      case Op::kScale:
        accumulate(grads, n.in[0], n.alpha * g);
        return;
      case Op::kRelu: {
        const Matrix& X = nodes_[static_cast<std::size_t>(n.in[0])].value;
        accumulate(grads, n.in[0], (X.array() > 0.0).select(g, 0.0));
        return;
      }
      case Op::kConcatCols: {
        const auto left = nodes_[static_cast<std::size_t>(n.in[0])].value.cols();
        accumulate(grads, n.in[0], g.leftCols(left));
        accumulate(grads, n.in[1], g.rightCols(g.cols() - left));
        return;
      }
      case Op::kGatherRows: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        Matrix d = Matrix::Zero(A.rows(), A.cols());
        for (std::size_t i = 0; i < n.index.size(); ++i) d.row(n.index[i]) += g.row(static_cast<Eigen::Index>(i));
        accumulate(grads, n.in[0], d);
        return;
      }
      case Op::kSegmentMax: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        Matrix d = Matrix::Zero(A.rows(), A.cols());
        for (Eigen::Index s = 0; s < n.argmax.rows(); ++s)
          for (Eigen::Index c = 0; c < n.argmax.cols(); ++c)
            if (n.argmax(s, c) >= 0) d(n.argmax(s, c), c) += g(s, c);
        accumulate(grads, n.in[0], d);
        return;
      }
      case Op::kReduceMax:
      case Op::kReduceMin: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        Matrix d = Matrix::Zero(A.rows(), A.cols());
        d.data()[n.index[0]] = g(0, 0);
        accumulate(grads, n.in[0], d);
        return;
      }
      case Op::kSum: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        accumulate(grads, n.in[0], Matrix::Constant(A.rows(), A.cols(), g(0, 0)));
        return;
      }
      case Op::kMean: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        if (A.size() == 0) return;
        accumulate(grads, n.in[0], Matrix::Constant(A.rows(), A.cols(), g(0, 0) / static_cast<double>(A.size())));
        return;
      }
      case Op::kSquaredNorm: {
        const Matrix& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
        accumulate(grads, n.in[0], 2.0 * g(0, 0) * A);
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const ParamTensor*, int> bound_;
};

// ---------------------------------------------------------------------------
// Dense layers

enum class Activation { kNone, kRelu };

struct Dense {
  ParamTensor weight;  // out x in
  ParamTensor bias;    // out
  Activation activation = Activation::kRelu;

  int in_width() const { return static_cast<int>(weight.value.cols()); }
  int out_width() const { return static_cast<int>(weight.value.rows()); }
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias.
inline Dense make_dense(const std::string& name, int in, int out, Activation act, Rng& rng) {
  Dense d{ParamTensor(name + ".weight", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)}),
          ParamTensor(name + ".bias", {static_cast<std::size_t>(out)}), act};
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index i = 0; i < d.weight.value.size(); ++i) d.weight.value.data()[i] = uniform(rng, -bound, bound);
  return d;
}

/// Builds a chain of dense layers with the given widths (widths.front() is the
/// input width). All layers use `hidden` except the last, which uses `last`.
inline std::vector<Dense> make_mlp(const std::string& name, const std::vector<int>& widths, Activation hidden,
                                   Activation last, Rng& rng) {
  if (widths.size() < 2) throw ShapeError("make_mlp: need at least input and output widths");
  std::vector<Dense> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool is_last = i + 2 == widths.size();
    layers.push_back(make_dense(name + "." + std::to_string(i), widths[i], widths[i + 1], is_last ? last : hidden, rng));
  }
  return layers;
}

/// Batched forward pass; rows of x are samples.
inline Matrix forward_mlp_batch(std::span<const Dense> layers, const Matrix& x) {
  Matrix cur = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Dense& l = layers[i];
    if (cur.cols() != l.in_width())
      throw ShapeError("forward_mlp: layer " + std::to_string(i) + " expects input width " +
                       std::to_string(l.in_width()) + ", got " + std::to_string(cur.cols()));
    Matrix next(cur.rows(), l.out_width());
    next.noalias() = cur * l.weight.value.transpose();
    next.rowwise() += l.bias.value.row(0);
    if (l.activation == Activation::kRelu) next = next.cwiseMax(0.0);
    cur = std::move(next);
  }
  return cur;
}

inline Eigen::VectorXd forward_mlp(std::span<const Dense> layers, const Eigen::VectorXd& input) {
  Matrix row = input.transpose();
  return forward_mlp_batch(layers, row).row(0).transpose();
}

/// Recording variant: every intermediate lands on the tape.
inline Var forward_mlp(Tape& tape, std::span<Dense> layers, Var x) {
  Var cur = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Dense& l = layers[i];
    if (tape.value(cur).cols() != l.in_width())
      throw ShapeError("forward_mlp: layer " + std::to_string(i) + " expects input width " +
                       std::to_string(l.in_width()) + ", got " + std::to_string(tape.value(cur).cols()));
    cur = tape.linear(cur, tape.param(l.weight), tape.param(l.bias));
    if (l.activation == Activation::kRelu) cur = tape.relu(cur);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of `loss` with respect to every coordinate of
/// every tensor in `params`. `loss` must read the current parameter values;
/// each coordinate is perturbed in place and restored.
inline std::vector<Matrix> finite_diff_grad(const std::function<double()>& loss, std::span<ParamTensor* const> params,
                                            double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (ParamTensor* p : params) {
    Matrix g(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double saved = w;
      w = saved + eps;
      const double up = loss();
      w = saved - eps;
      const double down = loss();
      w = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("finite_diff_grad: non-finite loss while perturbing " + p->name());
      g.data()[i] = (up - down) / (2.0 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam and the plateau schedule

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  double min_lr = 1e-5;
  int patience = 5;
  int rounds_without_improvement = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  long step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

/// One bias-corrected Adam step using each tensor's accumulated grad.
inline void adam_update(std::span<ParamTensor* const> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (ParamTensor* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_update: parameter count changed");
  for (ParamTensor* p : params)
    if (!p->grad.allFinite()) throw NumericError("adam_update: non-finite gradient in " + p->name());

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ParamTensor& p = *params[k];
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw ShapeError("adam_update: moment shape mismatch for " + p.name());
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
    if (!p.value.allFinite()) throw NumericError("adam_update: non-finite value in " + p.name());
  }
}

/// Higher metric is better. After `patience` rounds without improvement the
/// learning rate halves, never dropping below min_lr.
inline void lr_plateau_step(AdamState& state, double metric) {
  if (metric > state.best_metric) {
    state.best_metric = metric;
    state.rounds_without_improvement = 0;
    return;
  }
  if (++state.rounds_without_improvement >= state.patience) {
    state.lr = std::max(state.lr * 0.5, state.min_lr);
    state.rounds_without_improvement = 0;
  }
}

}  // namespace cam::diff
