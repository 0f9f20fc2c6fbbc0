#include "lde/prompting.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "lde/clustering.hpp"
#include "lde/digest.hpp"

namespace lde {

ClassifierHead ClassifierHead::init(Index dim, Index hidden, RngStream& rng) {
  require(dim >= 1 && hidden >= 1, "ClassifierHead: dim and hidden width must be >= 1");
  ClassifierHead h;
  h.w1.resize(dim, hidden);
  const double s1 = std::sqrt(2.0 / static_cast<double>(dim));
  for (Index i = 0; i < h.w1.size(); ++i) h.w1.data()[i] = s1 * rng.normal();
  h.b1 = Matrix::Zero(1, hidden);
  h.w2.resize(hidden, 1);
  const double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
  for (Index i = 0; i < h.w2.size(); ++i) h.w2.data()[i] = s2 * rng.normal();
  h.b2 = Matrix::Zero(1, 1);
  return h;
}

ElementSet compose_elements(const Matrix& centroids, const Matrix& prompts, std::vector<std::uint8_t> partition) {
  if (centroids.rows() != prompts.rows() || centroids.cols() != prompts.cols())
    throw ShapeError("compose_elements: centroids and prompts differ in shape");
  if (!partition.empty() && static_cast<Index>(partition.size()) != centroids.rows())
    throw ShapeError("compose_elements: partition does not cover every element");
  ElementSet e;
  e.elements = centroids + prompts;
  e.partition = std::move(partition);
  e.centroid_digest = matrix_digest(centroids);
  e.prompt_digest = matrix_digest(prompts);
  return e;
}

double classify_element(std::span<const double> element, const ClassifierHead& head) {
  if (static_cast<Index>(element.size()) != head.w1.rows()) throw ShapeError("classify_element: dimension mismatch");
  const Eigen::Map<const Eigen::RowVectorXd> e(element.data(), static_cast<Index>(element.size()));
  const Eigen::RowVectorXd hidden = (e * head.w1 + head.b1).cwiseMax(0.0);
  return sigmoid((hidden * head.w2)(0, 0) + head.b2(0, 0));
}

Var tuning_loss(Tape& tape, const Matrix& centroids, const TuneVars& v, std::span<const Index> batch_elements,
                const Matrix& batch_labels) {
  const Var c = tape.constant(centroids);
  const Var elements = tape.add(c, v.prompts);
  const Var x = tape.gather_rows(elements, batch_elements);
  const Var hidden = tape.relu(tape.add(tape.matmul(x, v.w1), v.b1));
  const Var logits = tape.add(tape.matmul(hidden, v.w2), v.b2);
  return tape.bce_with_logits(logits, batch_labels);
}

TuneResult prompt_tune(std::span<const std::uint8_t> labels, const Matrix& centroids,
                       std::span<const std::size_t> assignments, const TuneOptions& options) {
  require(options.lr > 0.0, "prompt_tune: lr must be > 0");
  require(!labels.empty(), "prompt_tune: empty knowledge set");
  require(labels.size() == assignments.size(), "prompt_tune: labels and assignments differ in length");
  require(options.batch >= 1, "prompt_tune: batch must be >= 1");
  for (std::size_t a : assignments) require(a < static_cast<std::size_t>(centroids.rows()), "prompt_tune: assignment out of range");

  RngStream rng(options.seed);
  TuneResult out;
  out.head = ClassifierHead::init(centroids.cols(), static_cast<Index>(options.hidden), rng);
  out.initial_head = out.head;
  out.prompts.prompts = Matrix::Zero(centroids.rows(), centroids.cols());

  const Sgd sgd{options.lr};
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t n = std::min(options.batch, order.size() - start);
      std::vector<Index> rows(n);
      Matrix y(static_cast<Index>(n), 1);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = order[start + i];
        rows[i] = static_cast<Index>(assignments[j]);
        y(static_cast<Index>(i), 0) = labels[j] ? 1.0 : 0.0;
      }
      Tape tape;
      auto param = [&](const Matrix& m) { return options.strict_prompts_only ? tape.constant(m) : tape.leaf(m); };
      TuneVars v;
      v.prompts = tape.leaf(out.prompts.prompts);
      v.w1 = param(out.head.w1);
      v.b1 = param(out.head.b1);
      v.w2 = param(out.head.w2);
      v.b2 = param(out.head.b2);
      const Var loss = tuning_loss(tape, centroids, v, rows, y);
      tape.backward(loss);
      total += tape.scalar(loss) * static_cast<double>(n);

      out.prompts.prompts -= options.lr * tape.grad(v.prompts);
      if (!options.strict_prompts_only) {
        Matrix* params[] = {&out.head.w1, &out.head.b1, &out.head.w2, &out.head.b2};
        const std::vector<Matrix> grads = {tape.grad(v.w1), tape.grad(v.b1), tape.grad(v.w2), tape.grad(v.b2)};
        sgd.step(params, grads);
      }
      ++out.prompts.steps;
    }
    out.loss_curve.push_back(total / static_cast<double>(order.size()));
  }
  return out;
}

TuneResult prompt_tune(const Matrix& knowledge, std::span<const std::uint8_t> labels, const Matrix& centroids,
                       const TuneOptions& options) {
  require(knowledge.rows() == static_cast<Index>(labels.size()), "prompt_tune: knowledge rows and labels differ");
  const auto assignments = assign_all(knowledge, centroids);
  return prompt_tune(labels, centroids, assignments, options);
}

std::string loss_curve_csv(std::span<const double> curve) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_bce\n";
  for (std::size_t i = 0; i < curve.size(); ++i) os << (i + 1) << ',' << curve[i] << '\n';
  return os.str();
}

}  // namespace lde
