#include "lde/clustering.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <thread>

#include "json.hpp"
#include "lde/digest.hpp"
#include "lde/rng.hpp"

namespace lde {
namespace {

constexpr Index kAssignChunk = 1024;

// Nearest centroid for rows [begin, end). Scores come from a GEMM; a point only
// leaves its current cluster when the exact distance to the new one is smaller,
// so an assignment pass can never increase the objective.
void nearest_chunk(const Matrix& data, const Matrix& centroids, const Eigen::VectorXd& c_norms, Index begin,
                   Index end, const std::vector<std::size_t>* current, std::vector<std::size_t>& out) {
  const Matrix scores = data.middleRows(begin, end - begin) * centroids.transpose();
  for (Index r = 0; r < end - begin; ++r) {
    const Index row = begin + r;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < centroids.rows(); ++k) {
      const double d = c_norms(k) - 2.0 * scores(r, k);
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::size_t>(k);
      }
    }
    if (current) {
      const std::size_t cur = (*current)[static_cast<std::size_t>(row)];
      if (best != cur) {
        const double d_new = (data.row(row) - centroids.row(static_cast<Index>(best))).squaredNorm();
        const double d_cur = (data.row(row) - centroids.row(static_cast<Index>(cur))).squaredNorm();
        if (!(d_new < d_cur)) best = cur;
      }
    }
    out[static_cast<std::size_t>(row)] = best;
  }
}

std::vector<std::size_t> nearest(const Matrix& data, const Matrix& centroids, const std::vector<std::size_t>* current,
                                 std::size_t threads) {
  std::vector<std::size_t> out(static_cast<std::size_t>(data.rows()));
  const Eigen::VectorXd c_norms = centroids.rowwise().squaredNorm();
  const Index chunks = (data.rows() + kAssignChunk - 1) / kAssignChunk;
  auto run = [&](std::size_t worker, std::size_t workers) {
    for (Index c = static_cast<Index>(worker); c < chunks; c += static_cast<Index>(workers)) {
      const Index begin = c * kAssignChunk;
      nearest_chunk(data, centroids, c_norms, begin, std::min(data.rows(), begin + kAssignChunk), current, out);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, static_cast<std::size_t>(chunks)));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
  }
  return out;
}

// Means of the assigned rows, summed in row order. Empty clusters take the point
// farthest from its own centroid, which is then removed from its old cluster.
Matrix update_centroids(const Matrix& data, const Matrix& previous, std::vector<std::size_t>& assignments) {
  const Index k = previous.rows();
  for (;;) {
    Matrix sums = Matrix::Zero(k, data.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Index r = 0; r < data.rows(); ++r) {
      const auto a = assignments[static_cast<std::size_t>(r)];
      sums.row(static_cast<Index>(a)) += data.row(r);
      ++counts[a];
    }
    const auto empty = std::find(counts.begin(), counts.end(), std::size_t{0});
    if (empty == counts.end()) {
      for (Index j = 0; j < k; ++j) sums.row(j) /= static_cast<double>(counts[static_cast<std::size_t>(j)]);
      return sums;
    }
    // Reseed one empty cluster and recompute.
    Matrix current = sums;
    for (Index j = 0; j < k; ++j) {
      const auto n = counts[static_cast<std::size_t>(j)];
      current.row(j) = n ? Eigen::RowVectorXd(sums.row(j) / static_cast<double>(n)) : Eigen::RowVectorXd(previous.row(j));
    }
    Index far = -1;
    double far_d = -1.0;
    for (Index r = 0; r < data.rows(); ++r) {
      const auto a = assignments[static_cast<std::size_t>(r)];
      if (counts[a] < 2) continue;  // never empty another cluster
      const double d = (data.row(r) - current.row(static_cast<Index>(a))).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = r;
      }
    }
    if (far < 0) throw PreconditionError("kmeans: cannot reseed empty cluster (too few points)");
    assignments[static_cast<std::size_t>(far)] = static_cast<std::size_t>(empty - counts.begin());
  }
}

Matrix plus_plus_init(const Matrix& data, std::size_t k, RngStream& rng) {
  const Index m = data.rows();
  Matrix c(static_cast<Index>(k), data.cols());
  std::vector<char> chosen(static_cast<std::size_t>(m), 0);
  Index first = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
  c.row(0) = data.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;
  Eigen::VectorXd d2 = (data.rowwise() - data.row(first)).rowwise().squaredNorm();
  for (std::size_t j = 1; j < k; ++j) {
    const double total = d2.sum();
    Index pick = -1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (Index i = 0; i < m; ++i) {
        acc += d2(i);
        if (acc > target && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (Index i = m; i-- > 0;)
          if (d2(i) > 0.0) { pick = i; break; }
      }
    } else {
      // Every remaining point coincides with a chosen centroid.
      pick = static_cast<Index>(std::find(chosen.begin(), chosen.end(), 0) - chosen.begin());
    }
    chosen[static_cast<std::size_t>(pick)] = 1;
    c.row(static_cast<Index>(j)) = data.row(pick);
    d2 = d2.cwiseMin((data.rowwise() - data.row(pick)).rowwise().squaredNorm());
  }
  return c;
}

}  // namespace

double kmeans_objective(const Matrix& data, const Matrix& centroids, std::span<const std::size_t> assignments) {
  require(static_cast<Index>(assignments.size()) == data.rows(), "kmeans_objective: assignment count mismatch");
  double total = 0.0;
  for (Index r = 0; r < data.rows(); ++r)
    total += (data.row(r) - centroids.row(static_cast<Index>(assignments[static_cast<std::size_t>(r)]))).squaredNorm();
  return total;
}

CentroidSet kmeans(const Matrix& data, const KMeansOptions& options) {
  const auto m = static_cast<std::size_t>(data.rows());
  require(options.k >= 1 && options.k <= m, "kmeans: need 1 <= K <= M (K=" + std::to_string(options.k) +
                                                 ", M=" + std::to_string(m) + ")");
  require(data.allFinite(), "kmeans: non-finite input");
  RngStream rng(options.seed);

  CentroidSet out;
  out.source_digest = matrix_digest(data);
  Matrix c = plus_plus_init(data, options.k, rng);
  std::vector<std::size_t> assignments = nearest(data, c, nullptr, options.threads);
  c = update_centroids(data, c, assignments);
  double objective = kmeans_objective(data, c, assignments);
  out.objective_history.push_back(objective);
  std::size_t iters = 1;

  while (iters < options.max_iters) {
    std::vector<std::size_t> next = nearest(data, c, &assignments, options.threads);
    if (next == assignments) {
      out.fixed_point = true;
      break;
    }
    assignments = std::move(next);
    c = update_centroids(data, c, assignments);
    const double updated = kmeans_objective(data, c, assignments);
    out.objective_history.push_back(updated);
    ++iters;
    const double prev = objective;
    objective = updated;
    if (prev <= 0.0 || (prev - updated) < options.rel_tol * prev) break;
  }

  out.centroids = std::move(c);
  out.iterations = iters;
  out.objective = objective;
  out.assignments = std::move(assignments);
  return out;
}

std::size_t assign(std::span<const double> embedding, const Matrix& centroids) {
  if (static_cast<Index>(embedding.size()) != centroids.cols())
    throw ShapeError("assign: embedding dim " + std::to_string(embedding.size()) + " != centroid dim " +
                     std::to_string(centroids.cols()));
  require(centroids.rows() >= 1, "assign: no centroids");
  const Eigen::Map<const Eigen::RowVectorXd> s(embedding.data(), static_cast<Index>(embedding.size()));
  std::size_t best = 0;
  double best_dot = centroids.row(0).dot(s);
  for (Index k = 1; k < centroids.rows(); ++k) {
    const double d = centroids.row(k).dot(s);
    if (d > best_dot) {
      best_dot = d;
      best = static_cast<std::size_t>(k);
    }
  }
  return best;
}

std::vector<std::size_t> assign_all(const Matrix& data, const Matrix& centroids) {
  std::vector<std::size_t> out(static_cast<std::size_t>(data.rows()));
  for (Index r = 0; r < data.rows(); ++r)
    out[static_cast<std::size_t>(r)] =
        assign(std::span<const double>(data.row(r).data(), static_cast<std::size_t>(data.cols())), centroids);
  return out;
}

std::vector<std::size_t> assign_euclidean(const Matrix& data, const Matrix& centroids) {
  if (data.cols() != centroids.cols()) throw ShapeError("assign_euclidean: dimension mismatch");
  std::vector<std::size_t> out(static_cast<std::size_t>(data.rows()));
  for (Index r = 0; r < data.rows(); ++r) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < centroids.rows(); ++k) {
      const double d = (data.row(r) - centroids.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::size_t>(k);
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

std::vector<std::size_t> ElementPartition::pedestrian_elements() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> ElementPartition::background_elements() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (!labels[i]) out.push_back(i);
  return out;
}

double ElementPartition::pedestrian_fraction() const {
  if (labels.empty()) return 0.0;
  return static_cast<double>(std::count(labels.begin(), labels.end(), 1)) / static_cast<double>(labels.size());
}

ElementPartition label_elements(std::span<const std::size_t> assignments, std::span<const std::uint8_t> labels,
                                std::size_t k) {
  require(assignments.size() == labels.size(), "label_elements: assignment/label length mismatch");
  ElementPartition p;
  p.labels.assign(k, 0);
  p.members.assign(k, {});
  p.pedestrian_members.assign(k, 0);
  for (std::size_t j = 0; j < assignments.size(); ++j) {
    require(assignments[j] < k, "label_elements: assignment out of range");
    p.members[assignments[j]].push_back(j);
    if (labels[j]) ++p.pedestrian_members[assignments[j]];
  }
  for (std::size_t i = 0; i < k; ++i) p.labels[i] = 2 * p.pedestrian_members[i] > p.members[i].size() ? 1 : 0;
  return p;
}

std::vector<ElementReport> attribute_report(const ElementPartition& partition, std::span<const Description> corpus,
                                            std::span<const std::size_t> assignments, const AttributeLexicon& lex,
                                            std::size_t top_n) {
  require(assignments.size() == corpus.size(), "attribute_report: corpus and assignments differ in length");
  std::set<std::string> vocabulary;
  for (AttributeType t : kAttributeTypes)
    for (const auto& v : lex.of(t)) vocabulary.insert(v);

  const std::size_t k = partition.k();
  std::vector<std::map<std::string, std::size_t>> counts(k);
  std::vector<std::size_t> members(k, 0), peds(k, 0);
  for (std::size_t j = 0; j < corpus.size(); ++j) {
    const std::size_t e = assignments[j];
    require(e < k, "attribute_report: assignment out of range");
    ++members[e];
    if (corpus[j].category == Category::Pedestrian) ++peds[e];
    for (const auto& v : vocabulary)
      if (contains_word(corpus[j].text, v)) ++counts[e][v];
  }

  std::vector<ElementReport> out(k);
  for (std::size_t e = 0; e < k; ++e) {
    ElementReport& r = out[e];
    r.element = e;
    r.label = partition.labels[e];
    r.members = members[e];
    r.pedestrian_members = peds[e];
    for (const auto& [value, n] : counts[e])
      r.top.push_back({value, static_cast<double>(n) / static_cast<double>(members[e])});
    std::stable_sort(r.top.begin(), r.top.end(),
                     [](const AttributeFrequency& a, const AttributeFrequency& b) { return a.frequency > b.frequency; });
    if (r.top.size() > top_n) r.top.resize(top_n);
  }
  return out;
}

std::string attribute_report_json(std::span<const ElementReport> report) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& r : report) {
    nlohmann::ordered_json e;
    e["label"] = r.label ? "pedestrian" : "background";
    e["members"] = r.members;
    e["pedestrian_members"] = r.pedestrian_members;
    auto top = nlohmann::ordered_json::array();
    for (const auto& f : r.top) top.push_back({f.value, f.frequency});
    e["top"] = std::move(top);
    j[std::to_string(r.element)] = std::move(e);
  }
  return j.dump(2);
}

}  // namespace lde
