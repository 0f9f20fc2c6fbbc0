#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <regex>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "lde/clustering.hpp"
#include "lde/embedding.hpp"

using namespace lde;

namespace {

Matrix randn(Index r, Index c, RngStream& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Hubert-Arabie adjusted Rand index from the contingency table.
double adjusted_rand(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::pair<std::size_t, std::size_t>, double> nij;
  std::map<std::size_t, double> ai, bj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  auto c2 = [](double n) { return n * (n - 1) / 2; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (const auto& [k, v] : nij) sum_ij += c2(v);
  for (const auto& [k, v] : ai) sum_a += c2(v);
  for (const auto& [k, v] : bj) sum_b += c2(v);
  const double expected = sum_a * sum_b / c2(static_cast<double>(a.size()));
  return (sum_ij - expected) / (0.5 * (sum_a + sum_b) - expected);
}

std::size_t scan(const Matrix& c, const Eigen::RowVectorXd& s) {
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < c.rows(); ++k) {
    double v = 0;
    for (Index j = 0; j < c.cols(); ++j) v += s(j) * c(k, j);
    if (v > best_v) {
      best_v = v;
      best = static_cast<std::size_t>(k);
    }
  }
  return best;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

TEST_CASE("K = 1 gives the mean") {
  RngStream rng(1);
  const Matrix x = randn(300, 7, rng);
  KMeansOptions o;
  o.k = 1;
  const CentroidSet c = kmeans(x, o);
  const Eigen::RowVectorXd mean = x.colwise().sum() / 300.0;
  CHECK((c.centroids.row(0) - mean).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("K = M reproduces the rows") {
  RngStream rng(2);
  const Matrix x = randn(12, 3, rng);
  KMeansOptions o;
  o.k = 12;
  const CentroidSet c = kmeans(x, o);
  CHECK(c.objective == 0.0);
  std::set<std::size_t> used;
  for (Index k = 0; k < 12; ++k) {
    bool found = false;
    for (Index r = 0; r < 12; ++r)
      if (c.centroids.row(k) == x.row(r)) {
        found = true;
        used.insert(static_cast<std::size_t>(r));
      }
    CHECK(found);
  }
  CHECK(used.size() == 12);
}

TEST_CASE("K outside [1, M] is rejected") {
  const Matrix x = Matrix::Ones(5, 2);
  KMeansOptions o;
  o.k = 6;
  CHECK_THROWS_AS(kmeans(x, o), PreconditionError);
  o.k = 0;
  CHECK_THROWS_AS(kmeans(x, o), PreconditionError);
}

TEST_CASE("planted clusters are recovered") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed + 100);
    const Index d = 16, per = 200;
    const double sigma = 1.0;
    Matrix centers = randn(4, d, rng);
    // Rescale so every pair of centers is at least 10 sigma apart.
    for (;;) {
      double min_gap = 1e300;
      for (Index a = 0; a < 4; ++a)
        for (Index b = a + 1; b < 4; ++b) min_gap = std::min(min_gap, (centers.row(a) - centers.row(b)).norm());
      if (min_gap >= 10 * sigma) break;
      centers *= 1.5;
    }
    Matrix x(4 * per, d);
    std::vector<std::size_t> truth;
    for (Index c = 0; c < 4; ++c)
      for (Index i = 0; i < per; ++i) {
        for (Index j = 0; j < d; ++j) x(c * per + i, j) = centers(c, j) + sigma * rng.normal();
        truth.push_back(static_cast<std::size_t>(c));
      }
    KMeansOptions o;
    o.k = 4;
    o.seed = seed;
    const CentroidSet c = kmeans(x, o);
    CAPTURE(seed);
    CHECK(adjusted_rand(c.assignments, truth) >= 0.99);
  }
}

TEST_CASE("objective is monotone and the result is a Lloyd fixed point") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream rng(seed);
    const Matrix x = randn(400, 5, rng);
    KMeansOptions o;
    o.k = 3 + seed;
    o.seed = seed;
    o.rel_tol = 0.0;
    const CentroidSet c = kmeans(x, o);
    CAPTURE(seed);
    REQUIRE(!c.objective_history.empty());
    for (std::size_t i = 1; i < c.objective_history.size(); ++i)
      CHECK(c.objective_history[i] <= c.objective_history[i - 1]);
    CHECK(c.objective >= 0.0);
    CHECK(c.objective == doctest::Approx(kmeans_objective(x, c.centroids, c.assignments)).epsilon(1e-12));
    if (c.fixed_point) {
      CHECK(assign_euclidean(x, c.centroids) == c.assignments);
      for (Index k = 0; k < c.centroids.rows(); ++k) {
        Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(5);
        double n = 0;
        for (std::size_t i = 0; i < c.assignments.size(); ++i)
          if (c.assignments[i] == static_cast<std::size_t>(k)) {
            sum += x.row(static_cast<Index>(i));
            n += 1;
          }
        CHECK((c.centroids.row(k) - sum / n).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
}

TEST_CASE("threaded assignment gives identical results") {
  RngStream rng(5);
  const Matrix x = randn(5000, 6, rng);
  KMeansOptions o;
  o.k = 9;
  const CentroidSet a = kmeans(x, o);
  o.threads = 4;
  const CentroidSet b = kmeans(x, o);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignments == b.assignments);
  CHECK(a.objective_history == b.objective_history);
}

TEST_CASE("assign hand cases") {
  Matrix c(2, 2);
  c << 0.9, 0.1, 0.1, 0.9;
  const std::vector<double> s = {1.0, 0.0};
  CHECK(assign(s, c) == 0);
  const std::vector<double> row1 = {0.1, 0.9};
  CHECK(assign(row1, c) == 1);
  Matrix tie(3, 2);
  tie << 0, 1, 1, 0, 1, 0;
  CHECK(assign(s, tie) == 1);
  const std::vector<double> bad = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(assign(bad, c), ShapeError);
}

TEST_CASE("assign matches an exhaustive scan") {
  for (Index k : {5, 50, 400}) {
    RngStream rng(static_cast<std::uint64_t>(k));
    Matrix c = randn(k, 8, rng);
    // Duplicate rows so exact ties occur.
    c.row(k - 1) = c.row(0);
    for (int p = 0; p < 1000; ++p) {
      Eigen::RowVectorXd s(8);
      for (Index j = 0; j < 8; ++j) s(j) = rng.normal();
      if (p % 10 == 0) s = c.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(k))));
      const std::vector<double> v(s.data(), s.data() + 8);
      REQUIRE(assign(v, c) == scan(c, s));
    }
  }
}

TEST_CASE("dot and Euclidean assignment agree for equal-norm centroids on the sphere") {
  RngStream rng(6);
  Matrix x = randn(500, 10, rng), c = randn(20, 10, rng);
  x.rowwise().normalize();
  c.rowwise().normalize();
  CHECK(assign_all(x, c) == assign_euclidean(x, c));
}

TEST_CASE("element labels") {
  const std::vector<std::size_t> a = {0, 0, 0, 1, 1, 1, 1, 1, 1};
  const std::vector<std::uint8_t> l = {1, 1, 1, 1, 1, 1, 0, 0, 0};
  const ElementPartition p = label_elements(a, l, 3);
  CHECK(p.labels == std::vector<std::uint8_t>{1, 0, 0});  // all-pedestrian, 3/3 tie, empty
  CHECK(p.pedestrian_elements() == std::vector<std::size_t>{0});
  CHECK(p.background_elements() == std::vector<std::size_t>{1, 2});
  CHECK(p.pedestrian_fraction() == doctest::Approx(1.0 / 3));
  CHECK(p.members[1].size() == 6);
  CHECK(p.pedestrian_members[1] == 3);
  const std::vector<std::size_t> out_of_range = {3};
  const std::vector<std::uint8_t> one = {1};
  CHECK_THROWS_AS(label_elements(out_of_range, one, 3), PreconditionError);
}

TEST_CASE("attribute report: all-yellow cluster") {
  const AttributeLexicon lex = build_lexicon();
  std::vector<Description> corpus(3);
  corpus[0].text = "A photo of a person in a yellow jacket.";
  corpus[1].text = "A photo of a tall man wearing a yellow shirt.";
  corpus[2].text = "A photo of a truck.";
  corpus[2].category = Category::Background;
  const std::vector<std::size_t> a = {0, 0, 1};
  const std::vector<std::uint8_t> l = {1, 1, 0};
  const auto report = attribute_report(label_elements(a, l, 2), corpus, a, lex);
  REQUIRE(!report[0].top.empty());
  CHECK(report[0].top[0].value == "yellow");
  CHECK(report[0].top[0].frequency == 1.0);
  const auto j = nlohmann::json::parse(attribute_report_json(report));
  CHECK(j["0"]["label"] == "pedestrian");
  CHECK(j["0"]["top"][0][0] == "yellow");
  CHECK(j["0"]["top"][0][1] == 1.0);
  CHECK(j["1"]["members"] == 1);
}

TEST_CASE("balanced corpus: element balance and attribute recount") {
  const AttributeLexicon lex = build_lexicon();
  const Corpus corpus = generate_corpus(CorpusConfig{}, lex);
  const AppearanceKnowledgeSet s = encode_corpus(corpus.descriptions, 128, 0, lex);
  KMeansOptions o;
  o.k = 200;
  const CentroidSet c = kmeans(s.as_double(), o);
  const auto a = assign_all(s.as_double(), c.centroids);
  const ElementPartition p = label_elements(a, s.labels, 200);
  MESSAGE("pedestrian elements: " << p.pedestrian_elements().size() << " / 200");
  CHECK(p.pedestrian_fraction() >= 0.40);
  CHECK(p.pedestrian_fraction() <= 0.60);
  CHECK(p.pedestrian_elements().size() + p.background_elements().size() == 200);

  const auto report = attribute_report(p, corpus.descriptions, a, lex, 1000);
  std::size_t checked = 0;
  for (const auto& r : report) {
    for (const auto& f : r.top) {
      const std::regex rx("\\b" + f.value + "\\b");
      std::size_t hits = 0;
      for (std::size_t j = 0; j < a.size(); ++j)
        if (a[j] == r.element && std::regex_search(lower(corpus.descriptions[j].text), rx)) ++hits;
      REQUIRE(f.frequency == static_cast<double>(hits) / static_cast<double>(r.members));
      ++checked;
    }
  }
  CHECK(checked > 200);
}
