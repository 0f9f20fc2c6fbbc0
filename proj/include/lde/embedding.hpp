#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lde/common.hpp"
#include "lde/corpus.hpp"

namespace lde {

enum class EmbeddingSource { Bridge, Pseudo };

/// Knowledge embeddings S (one row per description) with 1 = pedestrian labels.
struct AppearanceKnowledgeSet {
  MatrixF data;
  std::vector<std::uint8_t> labels;
  bool normalized = false;
  EmbeddingSource source = EmbeddingSource::Pseudo;

  Index count() const { return data.rows(); }
  Index dim() const { return data.cols(); }
  Matrix as_double() const { return data.cast<double>(); }
  /// Throws PreconditionError on non-finite rows, label length mismatch or
  /// (when flagged normalized) a row norm outside 1 +- 1e-5.
  void validate() const;
  bool operator==(const AppearanceKnowledgeSet&) const;
};

// Mixing weights of the pseudo-encoder: the class vector dominates, attribute
// vectors structure the clusters, per-text noise breaks exact ties.
inline constexpr double kAttributeWeight = 0.5;
inline constexpr double kTextNoiseWeight = 0.1;

/// Deterministic unit vector for a token.
Eigen::VectorXd token_vector(std::uint64_t master_seed, std::string_view token, std::size_t dim);

/// L2-normalize(u_class + 0.5 * sum_attr u_attr + 0.1 * n_text). The class word is
/// recovered by parsing the text; lines outside the grammar use their category.
Eigen::VectorXd encode_pseudo(const Description& d, std::size_t dim, std::uint64_t master_seed,
                              const AttributeLexicon& lex);

AppearanceKnowledgeSet encode_corpus(std::span<const Description> corpus, std::size_t dim,
                                     std::uint64_t master_seed, const AttributeLexicon& lex);

/// L2-normalizes every row in double precision and sets the normalized flag.
void normalize_rows(AppearanceKnowledgeSet& set);

// ---------------------------------------------------------------------------
// LDAE container, little-endian:
//   "LDAE" | u32 version=1 | u64 count | u32 dim | u8 flags | labels[count]? | f32[count*dim]
// flags: bit0 labels present, bit1 rows L2-normalized, bit2 pseudo-encoder output.

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint8_t kFlagLabels = 1u << 0;
inline constexpr std::uint8_t kFlagNormalized = 1u << 1;
inline constexpr std::uint8_t kFlagPseudo = 1u << 2;

enum class FormatErrc { BadMagic, VersionMismatch, Truncated, DimCountOverflow, TrailingData, Io };

class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& what) : Error(what), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

struct Container {
  MatrixF rows;
  std::optional<std::vector<std::uint8_t>> labels;
  std::uint8_t flags = 0;
};

std::vector<std::byte> encode_container(const MatrixF& rows, const std::vector<std::uint8_t>* labels,
                                        std::uint8_t extra_flags);
/// Decodes one container starting at `offset` and advances it past the payload.
Container decode_container(std::span<const std::byte> bytes, std::size_t& offset);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

void save_embeddings(const AppearanceKnowledgeSet& set, const std::filesystem::path& path);
/// Loads one container; bytes after it are a TrailingData error.
AppearanceKnowledgeSet load_embeddings(const std::filesystem::path& path);

/// Row matrix plus optional 0/1 labels (centroid and element files).
void save_matrix(const std::filesystem::path& path, const Matrix& m, const std::vector<std::uint8_t>* labels);
Container load_matrix(const std::filesystem::path& path);

struct NamedMatrix {
  std::string name;
  Matrix value;
};

/// "LDAB" | u32 version=1 | u32 sections | per section: u32 name length, name, LDAE container.
void save_bundle(const std::filesystem::path& path, std::span<const NamedMatrix> sections);
std::vector<NamedMatrix> load_bundle(const std::filesystem::path& path);

}  // namespace lde
