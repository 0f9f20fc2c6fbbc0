#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lde/common.hpp"
#include "lde/numerics.hpp"
#include "lde/rng.hpp"

namespace lde {

/// Learnable appearance prompts P, one row per centroid.
struct PromptSet {
  Matrix prompts;
  std::string init_scheme = "zeros";
  std::size_t steps = 0;
};

/// Appearance elements E = C + P with their pedestrian/background partition.
struct ElementSet {
  Matrix elements;
  std::vector<std::uint8_t> partition;
  std::string centroid_digest;
  std::string prompt_digest;

  Index k() const { return elements.rows(); }
};

/// Two linear layers with a ReLU between them: d -> hidden -> 1.
struct ClassifierHead {
  Matrix w1;  // d x h
  Matrix b1;  // 1 x h
  Matrix w2;  // h x 1
  Matrix b2;  // 1 x 1

  static ClassifierHead init(Index dim, Index hidden, RngStream& rng);
  Index hidden() const { return w1.cols(); }
};

/// Row-wise sum; the partition is carried through unchanged.
ElementSet compose_elements(const Matrix& centroids, const Matrix& prompts, std::vector<std::uint8_t> partition = {});

/// sigmoid(w2 . relu(w1 . e + b1) + b2)
double classify_element(std::span<const double> element, const ClassifierHead& head);

struct TuneOptions {
  double lr = 0.1;
  std::size_t epochs = 50;
  std::size_t batch = 256;
  std::size_t hidden = 256;
  std::uint64_t seed = 0;
  /// Freeze the randomly initialised head and train only the prompts.
  bool strict_prompts_only = false;
};

struct TuneResult {
  PromptSet prompts;
  ClassifierHead head;
  ClassifierHead initial_head;
  /// Sample-weighted mean BCE of each epoch.
  std::vector<double> loss_curve;
};

/// Handles of the tuning parameters on a tape.
struct TuneVars {
  Var prompts, w1, b1, w2, b2;
};

/// Mean BCE of a batch: sample j is represented by element assignment[j] = c + p
/// and scored against its own label. Centroids enter as constants.
Var tuning_loss(Tape& tape, const Matrix& centroids, const TuneVars& vars, std::span<const Index> batch_elements,
                const Matrix& batch_labels);

/// Plain SGD on the prompts (and the head unless strict) with centroids frozen.
/// `assignments` maps every row of the knowledge set to its centroid.
TuneResult prompt_tune(std::span<const std::uint8_t> labels, const Matrix& centroids,
                       std::span<const std::size_t> assignments, const TuneOptions& options);

/// Assigns every row of the knowledge set to its centroid by dot product first.
TuneResult prompt_tune(const Matrix& knowledge, std::span<const std::uint8_t> labels, const Matrix& centroids,
                       const TuneOptions& options);

/// Loss curve as "epoch,mean_bce" CSV.
std::string loss_curve_csv(std::span<const double> curve);

}  // namespace lde
