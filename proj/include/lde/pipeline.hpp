#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lde/clustering.hpp"
#include "lde/common.hpp"
#include "lde/corpus.hpp"
#include "lde/integration.hpp"
#include "lde/prompting.hpp"
#include "lde/toy.hpp"

namespace lde {

/// Invalid configuration. `path()` is the dotted field path, e.g. "toy.sigma_v".
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what) : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// A stage input is missing; `producer()` names the subcommand that writes it.
class DependencyError : public Error {
 public:
  DependencyError(std::string producer, const std::string& what)
      : Error(what + " (run `" + producer + "` first)"), producer_(std::move(producer)) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

/// A verification stage found a violation.
class CheckFailure : public Error {
 public:
  using Error::Error;
};

struct EmbeddingBlock {
  std::string provider = "pseudo";  // pseudo | file
  std::size_t dim = 128;
  bool normalize = true;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> file;
};

struct ToyBlock {
  ToyDataConfig data;
  ToyTrainConfig train;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<std::size_t> ks = {0, 100, 200, 300};
};

struct PipelineConfig {
  CorpusConfig corpus;
  EmbeddingBlock embedding;
  KMeansOptions cluster;
  TuneOptions tune;
  IntegrationConfig integrate;
  ToyBlock toy;
  std::size_t gradcheck_seeds = 20;

  PipelineConfig();
  /// Full configuration as JSON, every field present.
  std::string to_json() const;
  /// Digest of one block ("corpus", "embedding", ...), used for up-to-date checks.
  std::string block_digest(std::string_view block) const;
};

/// Defaults, overlaid by `json_text` (may be empty), then by `key.path=value`
/// overrides. Unknown keys, wrong types and out-of-range values throw ConfigError.
PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides = {});
/// Range checks across all blocks; throws ConfigError.
void validate_config(const PipelineConfig& config);

inline constexpr std::string_view kStages[] = {"gen-corpus", "encode",  "cluster",   "tune",  "analyze",
                                               "train-toy",  "sweep",   "gradcheck", "report"};

struct StageOptions {
  std::filesystem::path out = "out";
  bool force = false;
  std::size_t jobs = 1;
};

struct StageResult {
  std::string stage;
  bool skipped = false;
  std::vector<std::string> outputs;
  double wall_seconds = 0.0;
};

/// Runs one stage, writing its artifacts and a manifest line under options.out.
/// A stage whose config block and input digests match its last manifest entry,
/// and whose outputs are unchanged on disk, is skipped unless options.force.
StageResult run_stage(std::string_view stage, const PipelineConfig& config, const StageOptions& options);

inline constexpr std::string_view kManifestName = "manifest.jsonl";

}  // namespace lde
