#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lde/common.hpp"
#include "lde/corpus.hpp"

namespace lde {

struct KMeansOptions {
  std::size_t k = 200;
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  double rel_tol = 1e-6;
  /// Worker threads for the assignment step; results do not depend on it.
  std::size_t threads = 1;
};

/// Appearance knowledge centroids C.
struct CentroidSet {
  Matrix centroids;  // K x d
  std::string source_digest;
  std::size_t iterations = 0;
  double objective = 0.0;
  /// Sum of squared distances after every Lloyd iteration.
  std::vector<double> objective_history;
  /// Euclidean (Lloyd) assignment of every input row at termination.
  std::vector<std::size_t> assignments;
  /// True when the last iteration left every assignment unchanged.
  bool fixed_point = false;

  Index k() const { return centroids.rows(); }
};

/// k-means++ seeding followed by Lloyd iterations. Stops at max_iters, when the
/// relative objective change drops below rel_tol, or at a fixed point. An empty
/// cluster is reseeded with the point farthest from its current centroid.
CentroidSet kmeans(const Matrix& data, const KMeansOptions& options);

/// Sum of squared Euclidean distances from rows to their assigned centroids.
double kmeans_objective(const Matrix& data, const Matrix& centroids, std::span<const std::size_t> assignments);

/// argmax_k s . c_k; ties go to the smallest index.
std::size_t assign(std::span<const double> embedding, const Matrix& centroids);
std::vector<std::size_t> assign_all(const Matrix& data, const Matrix& centroids);
/// Nearest centroid by Euclidean distance; ties go to the smallest index.
std::vector<std::size_t> assign_euclidean(const Matrix& data, const Matrix& centroids);

/// E_p / E_b split of the K elements.
struct ElementPartition {
  std::vector<std::uint8_t> labels;  // 1 pedestrian-related, 0 background-related
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::size_t> pedestrian_members;

  std::size_t k() const { return labels.size(); }
  std::vector<std::size_t> pedestrian_elements() const;
  std::vector<std::size_t> background_elements() const;
  double pedestrian_fraction() const;
};

/// A centroid is pedestrian-related iff strictly more than half of its members
/// are pedestrian. Ties and empty centroids are background-related.
ElementPartition label_elements(std::span<const std::size_t> assignments, std::span<const std::uint8_t> labels,
                                std::size_t k);

struct AttributeFrequency {
  std::string value;
  double frequency = 0.0;
};

struct ElementReport {
  std::size_t element = 0;
  std::uint8_t label = 0;
  std::size_t members = 0;
  std::size_t pedestrian_members = 0;
  /// Sorted by descending frequency, then value.
  std::vector<AttributeFrequency> top;
};

/// For each element, the fraction of member descriptions whose text contains
/// each lexicon attribute value as a whole word or phrase.
std::vector<ElementReport> attribute_report(const ElementPartition& partition, std::span<const Description> corpus,
                                            std::span<const std::size_t> assignments, const AttributeLexicon& lex,
                                            std::size_t top_n = 5);

std::string attribute_report_json(std::span<const ElementReport> report);

}  // namespace lde
