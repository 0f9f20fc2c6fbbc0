#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lde/common.hpp"
#include "lde/rng.hpp"

namespace lde {

enum class Category { Pedestrian, Background };

enum class AttributeType { Age, Body, Expression, Clothes, Color, Pose, Direction, Action };

inline constexpr std::array<AttributeType, 8> kAttributeTypes = {
    AttributeType::Age,   AttributeType::Body, AttributeType::Expression, AttributeType::Clothes,
    AttributeType::Color, AttributeType::Pose, AttributeType::Direction,  AttributeType::Action};

std::string_view to_string(Category c);
std::optional<Category> category_from_string(std::string_view s);
std::string_view to_string(AttributeType t);
std::optional<AttributeType> attribute_from_string(std::string_view s);

using AttributeMap = std::map<AttributeType, std::string>;

/// Word lists and template formats the description grammar draws from.
struct AttributeLexicon {
  std::string version;
  std::array<std::vector<std::string>, kAttributeTypes.size()> values;
  /// Clothes nouns used without an article ("wearing blue pants", "with gray hair").
  std::vector<std::string> bare_clothes;
  std::vector<std::string> pedestrian_synonyms;
  std::vector<std::string> background_classes;
  /// Curated pedestrian templates.
  std::vector<std::string> templates;
  /// Uncurated basic templates used for background descriptions.
  std::vector<std::string> background_templates;

  const std::vector<std::string>& of(AttributeType t) const { return values[static_cast<std::size_t>(t)]; }
  bool is_bare_clothes(std::string_view noun) const;
  bool is_pedestrian_word(std::string_view word) const;
  /// Throws PreconditionError naming the first violated invariant.
  void check() const;
};

/// The basic hand-crafted template list before curation.
std::vector<std::string> basic_templates();
/// Strips ambiguous adjectives in front of {class}, drops unreal templates and
/// merges the duplicates this produces (first occurrence wins).
std::vector<std::string> curate_templates(std::span<const std::string> raw);
AttributeLexicon build_lexicon();

struct Description {
  std::uint64_t id = 0;
  std::string text;
  Category category = Category::Pedestrian;
  AttributeMap attributes;
  /// Index into the category's template list; -1 for externally ingested lines.
  std::int64_t template_id = -1;
  std::uint64_t rng_seed = 0;

  bool operator==(const Description&) const = default;
};

/// Fully resolved choices for one pedestrian sentence.
struct PedestrianChoice {
  std::size_t template_id = 0;
  std::string class_word;
  AttributeMap attributes;
  /// "in", "wearing" or "with"; only used when clothes are present.
  std::string clothes_prefix = "wearing";
};

/// "a" or "an" for the given following word.
std::string_view indefinite_article(std::string_view next_word);

std::string compose_pedestrian_text(const AttributeLexicon& lex, const PedestrianChoice& choice);
std::string compose_background_text(const AttributeLexicon& lex, std::size_t template_id,
                                    std::string_view class_word, std::optional<std::string_view> color);

/// Each attribute type is included independently with probability 0.5.
Description render_pedestrian(RngStream& rng, const AttributeLexicon& lex);
/// Only a color may prefix the class; templates are the uncurated basic list.
Description render_background(RngStream& rng, const AttributeLexicon& lex);

struct ConformanceReport {
  bool conforms = false;
  Category category = Category::Pedestrian;
  std::int64_t template_id = -1;
  std::string class_word;
  AttributeMap attributes;
  std::string reason;
};

/// Parses text against the closed template/attribute grammar.
ConformanceReport validate_description(std::string_view text, const AttributeLexicon& lex);

class DuplicateExhaustionError : public Error {
 public:
  using Error::Error;
};

struct CorpusConfig {
  std::size_t n_ped = 5000;
  std::size_t n_bg = 5000;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> external_bg_file;
};

struct Corpus {
  std::vector<Description> descriptions;
  std::size_t n_pedestrian = 0;
  std::size_t n_background = 0;
  CorpusConfig config;
  /// External lines rejected as malformed (empty, control characters, bad UTF-8, too long).
  std::size_t external_skipped = 0;
  /// External lines dropped because they mention a pedestrian word or repeat an earlier line.
  std::size_t external_filtered = 0;
};

inline constexpr std::size_t kMaxRerolls = 50;

/// Pedestrian ids come first, then background, then external lines. Slot i of a
/// category is rendered from derive_seed(seed, category, i, attempt); a rendered
/// string already present (case-insensitive) is re-rolled up to kMaxRerolls times.
Corpus generate_corpus(const CorpusConfig& config, const AttributeLexicon& lex);

/// True when text contains `word` delimited by non-alphanumeric characters (case-insensitive).
bool contains_word(std::string_view text, std::string_view word);

std::string description_to_json_line(const Description& d);
Description description_from_json_line(std::string_view line);
std::string corpus_to_jsonl(std::span<const Description> descriptions);
void write_corpus(const std::filesystem::path& path, std::span<const Description> descriptions);
std::vector<Description> read_corpus(const std::filesystem::path& path);

}  // namespace lde
