#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "lde/common.hpp"

namespace lde {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Define-by-run reverse-mode graph. Nodes are appended in creation order, so
/// walking ids backwards is a valid topological order and each node's backward
/// rule runs exactly once. A tape is built per step and thrown away.
///
/// In checked mode every forward value and every gradient is scanned and a
/// NonFiniteError is raised at the first NaN/Inf.
class Tape {
 public:
  explicit Tape(bool checked = false) : checked_(checked) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Matrix value);      // receives a gradient
  Var constant(Matrix value);  // never receives a gradient

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient after backward(); zero-shaped like value() if the node was unreached.
  const Matrix& grad(Var v) const;
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1.
  void backward(Var loss);

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  /// Same shape, or b is 1 x cols and is added to every row of a.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double s);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var softmax_rows(Var a);
  /// Per-row normalization with learnable 1 x cols scale and shift.
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
  /// Mean binary cross entropy of probabilities against 0/1 targets.
  Var bce(Var prob, const Matrix& target);
  /// Same objective taking logits; stable for saturated scores.
  Var bce_with_logits(Var logits, const Matrix& target);
  Var sum(Var a);
  Var mean(Var a);
  Var slice_cols(Var a, Index begin, Index count);
  Var concat_cols(std::span<const Var> parts);
  Var gather_rows(Var a, std::span<const Index> rows);

 private:
  using Backward = std::function<void(Tape&, std::size_t self)>;
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward);
  void accumulate(std::size_t id, const Matrix& g);
  bool any_grad(std::initializer_list<Var> vs) const;
  void check_finite(const Matrix& m, const char* what) const;

  std::vector<Node> nodes_;
  bool checked_;
};

// Plain (non-recorded) helpers shared by forward-only code paths.
double sigmoid(double x);
Matrix softmax_rows(const Matrix& x);

using LossBuilder = std::function<Var(Tape&, std::span<const Var> params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Analytic gradients of a scalar loss with respect to each parameter.
std::vector<Matrix> analytic_gradients(const LossBuilder& f, const std::vector<Matrix>& params);

/// Central differences on every coordinate against the analytic gradient.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8). eps must lie in [1e-7, 1e-3].
GradCheckReport finite_diff_check(const LossBuilder& f, std::vector<Matrix> params, double eps = 1e-5);

struct Sgd {
  double lr = 0.1;
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads) const;
};

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace lde
