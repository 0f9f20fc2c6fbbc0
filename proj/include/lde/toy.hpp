#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lde/clustering.hpp"
#include "lde/common.hpp"
#include "lde/corpus.hpp"
#include "lde/embedding.hpp"
#include "lde/integration.hpp"
#include "lde/prompting.hpp"

namespace lde {

struct ToyDataConfig {
  std::size_t n = 5000;
  std::size_t visual_dim = 64;
  double sigma_v = 0.3;
  std::uint64_t seed = 0;
  /// Pseudo-encoder space the descriptions are embedded in before projection.
  std::size_t embed_dim = 128;
  std::uint64_t embed_seed = 0;

  void validate() const;
};

struct ToyDataset {
  Matrix queries;  // N x d_v
  std::vector<std::uint8_t> labels;
  ToyDataConfig config;
  std::string projection_digest;

  std::size_t size() const { return labels.size(); }
  ToyDataset slice(std::size_t begin, std::size_t end) const;
};

/// Fixed seeded d x d_v map from the description space to the visual space.
Matrix visual_projection(std::size_t embed_dim, std::size_t visual_dim, std::uint64_t seed);

/// One query: projection . encoding + sigma * noise drawn from rng.
Matrix make_query(const Description& description, const Matrix& projection, double sigma, std::uint64_t embed_seed,
                  const AttributeLexicon& lex, RngStream& rng);

ToyDataset synth_dataset(const ToyDataConfig& config, const AttributeLexicon& lex);

/// L_ref is a per-element mean, so its magnitude is about 1/K; the toy weight
/// is scaled accordingly.
constexpr double kToyLambdaRef = 1000.0;

struct ToyTrainConfig {
  IntegrationConfig integration = {.lambda_ref = kToyLambdaRef};
  std::size_t epochs = 30;
  std::size_t batch = 64;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  std::size_t n_train = 4000;

  void validate() const;
};

/// Optional integration module followed by a linear classifier.
struct ToyModel {
  std::optional<IntegrationModule> integration;
  Matrix w_cls;  // d_v x 1
  Matrix b_cls;  // 1 x 1

  std::size_t parameter_count() const;
  std::size_t baseline_parameter_count() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double task_loss = 0.0;  // training-split mean
  double ref_loss = 0.0;   // training-split mean, 0 without elements
  double accuracy = 0.0;   // evaluation split
  double average_precision = 0.0;
  /// Mean attention mass on the correct partition; NaN without elements.
  double pedestrian_mass = 0.0;
  double background_mass = 0.0;
  double correct_mass = 0.0;
};

struct ToyRun {
  ToyTrainConfig config;
  std::size_t k = 0;
  /// Entry 0 is the untrained model.
  std::vector<EpochMetrics> epochs;
  ToyModel model;

  const EpochMetrics& final() const { return epochs.back(); }
};

/// sum_n (R_n - R_{n-1}) P_n over descending score thresholds.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Trains on the first n_train rows and evaluates on the rest. Pass no elements
/// for the bare classifier.
ToyRun train_toy(const ToyDataset& dataset, const ElementSet* elements, const ToyTrainConfig& config);

std::string toy_run_json(const ToyRun& run);

struct SweepConfig {
  std::vector<std::size_t> ks = {0, 100, 200, 300};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  KMeansOptions kmeans;
  TuneOptions tune;
  ToyTrainConfig toy;
  std::size_t jobs = 1;
};

struct SweepRow {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double average_precision = 0.0;
  double ref_mass = 0.0;  // NaN for K = 0
  double initial_ref_mass = 0.0;
  double pedestrian_fraction = 0.0;
  /// Element-to-centroid assignment of every knowledge row, kept for recomputation.
  std::vector<std::size_t> assignments;
  std::vector<std::uint8_t> partition;
};

struct SweepSummary {
  std::size_t k = 0;
  double acc_mean = 0.0, acc_sd = 0.0;
  double ap_mean = 0.0, ap_sd = 0.0;
  double mass_mean = 0.0, mass_sd = 0.0;
};

struct SweepTable {
  std::vector<SweepRow> rows;  // ordered by (k, seed) as given
  std::vector<SweepSummary> summary;
};

/// cluster -> tune -> train_toy for every (K, seed); K = 0 is the baseline.
SweepTable ablation_k_sweep(const AppearanceKnowledgeSet& knowledge, const ToyDataset& dataset,
                            const SweepConfig& config);

std::string sweep_csv(const SweepTable& table);
std::string sweep_summary_json(const SweepTable& table);
std::string sweep_svg(const SweepTable& table);

struct OverheadReport {
  std::size_t module_params = 0;
  std::size_t baseline_params = 0;
  std::size_t total_params = 0;
  std::size_t added_params = 0;
  double ratio = 0.0;  // added / baseline
};

OverheadReport overhead_report(const ToyModel& with, const ToyModel& without);
std::string overhead_json(const OverheadReport& report);

}  // namespace lde
