#include "lde/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lde {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  if (checked_) check_finite(value, "forward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Matrix value) { return push(std::move(value), true, nullptr); }
Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.size() == 0 && n.value.size() != 0) {
    // Unreached node: expose a zero gradient of the right shape.
    const_cast<Node&>(n).grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ShapeError("scalar: value is not 1x1");
  return m(0, 0);
}

bool Tape::any_grad(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return nodes_.at(v.id).requires_grad; });
}

void Tape::check_finite(const Matrix& m, const char* what) const {
  if (!m.allFinite()) throw NonFiniteError(std::string("non-finite value in ") + what);
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.id].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    if (checked_) check_finite(n.grad, "backward");
    n.backward(*this, i);
  }
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
  return push(A * B, any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.accumulate(a.id, G * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b.id, t.value(a).transpose() * G);
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  return push(A * B.transpose(), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.accumulate(a.id, G * t.value(b));
    if (t.requires_grad(b)) t.accumulate(b.id, G.transpose() * t.value(a));
  });
}

Var Tape::add(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (B.rows() == 1 && A.rows() != 1 && B.cols() == A.cols()) {
    Matrix out = A.rowwise() + B.row(0);
    return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
      const Matrix& G = t.nodes_[self].grad;
      t.accumulate(a.id, G);
      if (t.requires_grad(b)) t.accumulate(b.id, G.colwise().sum());
    });
  }
  require_same_shape(A, B, "add");
  return push(A + B, any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    t.accumulate(a.id, G);
    t.accumulate(b.id, G);
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  return push(value(a) - value(b), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    t.accumulate(a.id, G);
    if (t.requires_grad(b)) t.accumulate(b.id, -G);
  });
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  return push(value(a).cwiseProduct(value(b)), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.accumulate(a.id, G.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b.id, G.cwiseProduct(t.value(a)));
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, any_grad({a}), [a, s](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.nodes_[self].grad * s);
  });
}

Var Tape::relu(Var a) {
  return push(value(a).cwiseMax(0.0), any_grad({a}), [a](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    t.accumulate(a.id, (t.value(a).array() > 0.0).select(G, 0.0));
  });
}

Var Tape::sigmoid(Var a) {
  Matrix y = value(a).unaryExpr([](double x) { return lde::sigmoid(x); });
  return push(std::move(y), any_grad({a}), [a](Tape& t, std::size_t self) {
    const Matrix& Y = t.nodes_[self].value;
    const Matrix& G = t.nodes_[self].grad;
    t.accumulate(a.id, (G.array() * Y.array() * (1.0 - Y.array())).matrix());
  });
}

Var Tape::softmax_rows(Var a) {
  return push(lde::softmax_rows(value(a)), any_grad({a}), [a](Tape& t, std::size_t self) {
    const Matrix& Y = t.nodes_[self].value;
    const Matrix& G = t.nodes_[self].grad;
    Matrix dx(Y.rows(), Y.cols());
    for (Index r = 0; r < Y.rows(); ++r) {
      const double dot = G.row(r).dot(Y.row(r));
      dx.row(r) = (Y.row(r).array() * (G.row(r).array() - dot)).matrix();
    }
    t.accumulate(a.id, dx);
  });
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("layer_norm_rows: eps must be > 0");
  const Matrix& X = value(x);
  const Index n = X.cols();
  if (value(gamma).rows() != 1 || value(gamma).cols() != n || value(beta).rows() != 1 ||
      value(beta).cols() != n)
    throw ShapeError("layer_norm_rows: scale/shift must be 1 x cols");
  Matrix xhat(X.rows(), n);
  Eigen::VectorXd inv_std(X.rows());
  for (Index r = 0; r < X.rows(); ++r) {
    const double mu = X.row(r).mean();
    const auto centered = (X.row(r).array() - mu).eval();
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  Matrix y = (xhat.array().rowwise() * value(gamma).row(0).array()).matrix();
  y.rowwise() += value(beta).row(0);
  return push(std::move(y), any_grad({x, gamma, beta}),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                const Matrix& G = t.nodes_[self].grad;
                if (t.requires_grad(beta)) t.accumulate(beta.id, G.colwise().sum());
                if (t.requires_grad(gamma)) t.accumulate(gamma.id, G.cwiseProduct(xhat).colwise().sum());
                if (t.requires_grad(x)) {
                  const Matrix dxhat = (G.array().rowwise() * t.value(gamma).row(0).array()).matrix();
                  Matrix dx(G.rows(), G.cols());
                  for (Index r = 0; r < G.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(G.cols());
                    dx.row(r) = (inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2)).matrix();
                  }
                  t.accumulate(x.id, dx);
                }
              });
}

Var Tape::bce(Var prob, const Matrix& target) {
  const Matrix& P = value(prob);
  require_same_shape(P, target, "bce");
  const double n = static_cast<double>(P.size());
  double loss = 0.0;
  for (Index i = 0; i < P.size(); ++i) {
    const double p = P.data()[i];
    const double y = target.data()[i];
    loss -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return push(std::move(out), any_grad({prob}), [prob, target, n](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    const Matrix& P = t.value(prob);
    Matrix d(P.rows(), P.cols());
    for (Index i = 0; i < P.size(); ++i) {
      const double p = P.data()[i];
      const double y = target.data()[i];
      d.data()[i] = g * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
    }
    t.accumulate(prob.id, d);
  });
}

Var Tape::bce_with_logits(Var logits, const Matrix& target) {
  const Matrix& Z = value(logits);
  require_same_shape(Z, target, "bce_with_logits");
  const double n = static_cast<double>(Z.size());
  double loss = 0.0;
  for (Index i = 0; i < Z.size(); ++i) {
    const double z = Z.data()[i];
    loss += std::max(z, 0.0) - z * target.data()[i] + std::log1p(std::exp(-std::abs(z)));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return push(std::move(out), any_grad({logits}), [logits, target, n](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    const Matrix& Z = t.value(logits);
    Matrix d(Z.rows(), Z.cols());
    for (Index i = 0; i < Z.size(); ++i) d.data()[i] = g * (lde::sigmoid(Z.data()[i]) - target.data()[i]) / n;
    t.accumulate(logits.id, d);
  });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), any_grad({a}), [a](Tape& t, std::size_t self) {
    const Matrix& A = t.value(a);
    t.accumulate(a.id, Matrix::Constant(A.rows(), A.cols(), t.nodes_[self].grad(0, 0)));
  });
}

Var Tape::mean(Var a) {
  const double n = static_cast<double>(value(a).size());
  if (n == 0) throw ShapeError("mean: empty value");
  Matrix out(1, 1);
  out(0, 0) = value(a).sum() / n;
  return push(std::move(out), any_grad({a}), [a, n](Tape& t, std::size_t self) {
    const Matrix& A = t.value(a);
    t.accumulate(a.id, Matrix::Constant(A.rows(), A.cols(), t.nodes_[self].grad(0, 0) / n));
  });
}

Var Tape::slice_cols(Var a, Index begin, Index count) {
  const Matrix& A = value(a);
  if (begin < 0 || count < 0 || begin + count > A.cols()) throw ShapeError("slice_cols: out of range");
  return push(A.middleCols(begin, count), any_grad({a}), [a, begin, count](Tape& t, std::size_t self) {
    const Matrix& A = t.value(a);
    Matrix d = Matrix::Zero(A.rows(), A.cols());
    d.middleCols(begin, count) = t.nodes_[self].grad;
    t.accumulate(a.id, d);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Index rows = value(parts[0]).rows();
  Index cols = 0;
  bool grad = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += value(p).cols();
    grad = grad || requires_grad(p);
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(out), grad, [ps](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    Index at = 0;
    for (Var p : ps) {
      const Index c = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate(p.id, G.middleCols(at, c));
      at += c;
    }
  });
}

Var Tape::gather_rows(Var a, std::span<const Index> rows) {
  const Matrix& A = value(a);
  Matrix out(static_cast<Index>(rows.size()), A.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = A.row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return push(std::move(out), any_grad({a}), [a, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Matrix& G = t.nodes_[self].grad;
    const Matrix& A = t.value(a);
    Matrix d = Matrix::Zero(A.rows(), A.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += G.row(static_cast<Index>(i));
    t.accumulate(a.id, d);
  });
}

std::vector<Matrix> analytic_gradients(const LossBuilder& f, const std::vector<Matrix>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.leaf(p));
  const Var loss = f(tape, vars);
  tape.backward(loss);
  std::vector<Matrix> grads;
  grads.reserve(vars.size());
  for (Var v : vars) grads.push_back(tape.grad(v));
  return grads;
}

GradCheckReport finite_diff_check(const LossBuilder& f, std::vector<Matrix> params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw PreconditionError("finite_diff_check: eps must lie in [1e-7, 1e-3]");

  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params) vars.push_back(tape.constant(p));
    const double v = tape.scalar(f(tape, vars));
    if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: function value is not finite");
    return v;
  };

  evaluate();
  const std::vector<Matrix> analytic = analytic_gradients(f, params);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Index i = 0; i < params[p].size(); ++i) {
      double& x = params[p].data()[i];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate();
      x = saved - eps;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

void Sgd::step(std::span<Matrix* const> params, std::span<const Matrix> grads) const {
  if (params.size() != grads.size()) throw ShapeError("Sgd::step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= lr * grads[i];
}

void Adam::step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ShapeError("Adam::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
    params[i]->array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

}  // namespace lde
