#include <cmath>
#include <cstring>

#include "doctest.h"
#include "lde/clustering.hpp"
#include "lde/digest.hpp"
#include "lde/embedding.hpp"
#include "lde/prompting.hpp"

using namespace lde;

namespace {

Matrix randn(Index r, Index c, RngStream& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

struct Pipeline {
  AppearanceKnowledgeSet set;
  Matrix data, centroids;
  std::vector<std::size_t> assignments;
};

Pipeline build(std::size_t n_ped, std::size_t n_bg, std::size_t k) {
  const AttributeLexicon lex = build_lexicon();
  CorpusConfig cfg;
  cfg.n_ped = n_ped;
  cfg.n_bg = n_bg;
  Pipeline p;
  p.set = encode_corpus(generate_corpus(cfg, lex).descriptions, 128, 0, lex);
  p.data = p.set.as_double();
  KMeansOptions o;
  o.k = k;
  p.centroids = kmeans(p.data, o).centroids;
  p.assignments = assign_all(p.data, p.centroids);
  return p;
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("compose_elements arithmetic") {
  RngStream rng(1);
  const Matrix c = randn(4, 3, rng);
  CHECK(same_bits(compose_elements(c, Matrix::Zero(4, 3)).elements, c));
  CHECK(same_bits(compose_elements(Matrix::Zero(4, 3), c).elements, c));
  Matrix c1(1, 2), p1(1, 2);
  c1 << 1, 2;
  p1 << 0.5, -2;
  const Matrix e = compose_elements(c1, p1).elements;
  CHECK(e(0, 0) == 1.5);
  CHECK(e(0, 1) == 0.0);
  CHECK_THROWS_AS(compose_elements(c, Matrix::Zero(3, 3)), ShapeError);
  CHECK_THROWS_AS(compose_elements(c, Matrix::Zero(4, 3), {1, 0}), ShapeError);
  const ElementSet s = compose_elements(c, c, {1, 0, 1, 0});
  CHECK(s.centroid_digest == matrix_digest(c));
  CHECK(s.partition == std::vector<std::uint8_t>{1, 0, 1, 0});
}

TEST_CASE("classify_element") {
  ClassifierHead h;
  h.w1 = Matrix::Zero(3, 4);
  h.b1 = Matrix::Zero(1, 4);
  h.w2 = Matrix::Zero(4, 1);
  h.b2 = Matrix::Zero(1, 1);
  const std::vector<double> e = {1, 2, 3};
  CHECK(classify_element(e, h) == 0.5);

  RngStream rng(2);
  h = ClassifierHead::init(3, 4, rng);
  h.b1 = randn(1, 4, rng);
  h.b2 = randn(1, 1, rng);
  for (int i = 0; i < 10000; ++i) {
    const std::vector<double> x = {rng.normal(), rng.normal(), rng.normal()};
    const double p = classify_element(x, h);
    REQUIRE(p > 0.0);
    REQUIRE(p < 1.0);
    // Scalar recomputation of the two layers.
    double z = h.b2(0, 0);
    for (Index j = 0; j < 4; ++j) {
      double a = h.b1(0, j);
      for (Index i2 = 0; i2 < 3; ++i2) a += x[static_cast<std::size_t>(i2)] * h.w1(i2, j);
      z += std::max(a, 0.0) * h.w2(j, 0);
    }
    REQUIRE(p == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
  }
  const std::vector<double> wrong = {1, 2};
  CHECK_THROWS_AS(classify_element(wrong, h), ShapeError);
}

TEST_CASE("only the assigned prompt row receives gradient") {
  RngStream rng(3);
  const Matrix c = randn(5, 4, rng);
  ClassifierHead h = ClassifierHead::init(4, 6, rng);
  for (Index k = 0; k < 5; ++k) {
    Tape t;
    const TuneVars v{t.leaf(randn(5, 4, rng, 0.1)), t.leaf(h.w1), t.leaf(h.b1), t.leaf(h.w2), t.leaf(h.b2)};
    const std::vector<Index> batch = {k};
    Matrix y(1, 1);
    y << 1.0;
    t.backward(tuning_loss(t, c, v, batch, y));
    const Matrix& g = t.grad(v.prompts);
    for (Index r = 0; r < 5; ++r) {
      if (r == k) CHECK(g.row(r).norm() > 0.0);
      else CHECK(g.row(r).isZero());
    }
  }
}

TEST_CASE("preconditions") {
  const Matrix c = Matrix::Zero(2, 3);
  const std::vector<std::uint8_t> labels = {1, 0};
  const std::vector<std::size_t> a = {0, 1};
  TuneOptions o;
  o.lr = 0.0;
  CHECK_THROWS_AS(prompt_tune(labels, c, a, o), PreconditionError);
  o.lr = 0.1;
  CHECK_THROWS_AS(prompt_tune(std::span<const std::uint8_t>{}, c, std::span<const std::size_t>{}, o),
                  PreconditionError);
  const std::vector<std::size_t> out = {0, 2};
  CHECK_THROWS_AS(prompt_tune(labels, c, out, o), PreconditionError);
}

TEST_CASE("zero epochs is the identity") {
  const Pipeline p = build(100, 100, 10);
  TuneOptions o;
  o.epochs = 0;
  o.seed = 4;
  const TuneResult r = prompt_tune(p.set.labels, p.centroids, p.assignments, o);
  CHECK(same_bits(r.prompts.prompts, Matrix::Zero(10, 128)));
  CHECK(r.prompts.init_scheme == "zeros");
  CHECK(r.prompts.steps == 0);
  CHECK(same_bits(r.head.w1, r.initial_head.w1));
  CHECK(same_bits(r.head.w2, r.initial_head.w2));
  CHECK(same_bits(r.head.b1, r.initial_head.b1));
  CHECK(same_bits(r.head.b2, r.initial_head.b2));
  CHECK(r.loss_curve.empty());
  CHECK(same_bits(compose_elements(p.centroids, r.prompts.prompts).elements, p.centroids));
}

TEST_CASE("separable set: elements classified as their majority label") {
  const Pipeline p = build(1000, 1000, 50);
  const std::string digest = matrix_digest(p.centroids);
  TuneOptions o;
  o.seed = 5;
  const TuneResult r = prompt_tune(p.set.labels, p.centroids, p.assignments, o);
  CHECK(matrix_digest(p.centroids) == digest);
  const ElementSet e = compose_elements(p.centroids, r.prompts.prompts);
  CHECK(same_bits(e.elements, Matrix(p.centroids + r.prompts.prompts)));

  // Majority label by direct counting.
  std::vector<int> ped(50, 0), all(50, 0);
  for (std::size_t j = 0; j < p.assignments.size(); ++j) {
    ++all[p.assignments[j]];
    ped[p.assignments[j]] += p.set.labels[j];
  }
  double mean_p = 0, mean_b = 0;
  int n_p = 0, n_b = 0;
  std::size_t agree = 0;
  for (Index k = 0; k < 50; ++k) {
    REQUIRE(all[k] > 0);
    const bool majority = 2 * ped[k] > all[k];
    const std::vector<double> row(e.elements.row(k).data(), e.elements.row(k).data() + 128);
    const double prob = classify_element(row, r.head);
    agree += (prob >= 0.5) == majority ? 1 : 0;
    (majority ? mean_p : mean_b) += prob;
    ++(majority ? n_p : n_b);
  }
  CHECK(agree == 50);
  CHECK(mean_p / n_p >= 0.9);
  CHECK(mean_b / n_b <= 0.1);
}

TEST_CASE("strict mode trains prompts only") {
  const Pipeline p = build(200, 200, 12);
  TuneOptions o;
  o.epochs = 5;
  o.strict_prompts_only = true;
  const TuneResult r = prompt_tune(p.set.labels, p.centroids, p.assignments, o);
  CHECK(same_bits(r.head.w1, r.initial_head.w1));
  CHECK(same_bits(r.head.b2, r.initial_head.b2));
  CHECK(r.prompts.prompts.norm() > 0.0);
  CHECK(r.loss_curve.back() < r.loss_curve.front());
}

TEST_CASE("tuning is deterministic") {
  const Pipeline p = build(100, 100, 8);
  TuneOptions o;
  o.epochs = 3;
  o.seed = 11;
  const TuneResult a = prompt_tune(p.set.labels, p.centroids, p.assignments, o);
  const TuneResult b = prompt_tune(p.data, p.set.labels, p.centroids, o);
  CHECK(same_bits(a.prompts.prompts, b.prompts.prompts));
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(loss_curve_csv(a.loss_curve).rfind("epoch,mean_bce\n1,", 0) == 0);
}

TEST_CASE("seeded default run") {
  const Pipeline p = build(5000, 5000, 200);
  TuneOptions o;
  const TuneResult r = prompt_tune(p.set.labels, p.centroids, p.assignments, o);
  REQUIRE(r.loss_curve.size() == 50);
  MESSAGE("final epoch BCE " << r.loss_curve.back());
  CHECK(r.loss_curve.back() < 0.1);
  std::vector<double> avg;
  for (std::size_t i = 4; i < r.loss_curve.size(); ++i) {
    double s = 0;
    for (std::size_t j = i - 4; j <= i; ++j) s += r.loss_curve[j];
    avg.push_back(s / 5);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) CHECK(avg[i] <= avg[i - 1]);
}
