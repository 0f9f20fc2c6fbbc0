#include "lde/embedding.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "lde/rng.hpp"

namespace lde {
namespace {

constexpr char kMagic[4] = {'L', 'D', 'A', 'E'};
constexpr char kBundleMagic[4] = {'L', 'D', 'A', 'B'};
constexpr std::size_t kHeaderSize = 4 + 4 + 8 + 4 + 1;

template <class T>
void put_le(std::vector<std::byte>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(std::span<const std::byte> in, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return static_cast<T>(v);
}

void need(std::span<const std::byte> bytes, std::size_t offset, std::size_t n, const char* what) {
  if (offset > bytes.size() || bytes.size() - offset < n)
    throw FormatError(FormatErrc::Truncated, std::string("LDAE: truncated ") + what);
}

}  // namespace

void AppearanceKnowledgeSet::validate() const {
  require(static_cast<Index>(labels.size()) == count(), "knowledge set: label count differs from row count");
  require(data.allFinite(), "knowledge set: non-finite entry");
  if (normalized) {
    for (Index r = 0; r < count(); ++r) {
      const double n = data.row(r).cast<double>().norm();
      require(std::abs(n - 1.0) <= 1e-5, "knowledge set: row " + std::to_string(r) + " is not unit norm");
    }
  }
}

bool AppearanceKnowledgeSet::operator==(const AppearanceKnowledgeSet& o) const {
  if (data.rows() != o.data.rows() || data.cols() != o.data.cols()) return false;
  return std::memcmp(data.data(), o.data.data(), sizeof(float) * static_cast<std::size_t>(data.size())) == 0 &&
         labels == o.labels && normalized == o.normalized && source == o.source;
}

Eigen::VectorXd token_vector(std::uint64_t master_seed, std::string_view token, std::size_t dim) {
  RngStream rng(hash_string(master_seed, token));
  Eigen::VectorXd v(static_cast<Index>(dim));
  for (Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  return v / v.norm();
}

Eigen::VectorXd encode_pseudo(const Description& d, std::size_t dim, std::uint64_t master_seed,
                              const AttributeLexicon& lex) {
  require(dim >= 8, "encode_pseudo: dim must be >= 8");
  const ConformanceReport parsed = validate_description(d.text, lex);
  const std::string class_token = parsed.conforms ? "class:" + parsed.class_word
                                                  : "category:" + std::string(to_string(d.category));
  Eigen::VectorXd v = token_vector(master_seed, class_token, dim);
  for (const auto& [type, value] : d.attributes)
    v += kAttributeWeight * token_vector(master_seed, "attr:" + std::string(to_string(type)) + "=" + value, dim);
  v += kTextNoiseWeight * token_vector(master_seed, "text:" + d.text, dim);
  return v / v.norm();
}

AppearanceKnowledgeSet encode_corpus(std::span<const Description> corpus, std::size_t dim,
                                     std::uint64_t master_seed, const AttributeLexicon& lex) {
  AppearanceKnowledgeSet set;
  set.data.resize(static_cast<Index>(corpus.size()), static_cast<Index>(dim));
  set.labels.resize(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    set.data.row(static_cast<Index>(i)) = encode_pseudo(corpus[i], dim, master_seed, lex).cast<float>().transpose();
    set.labels[i] = corpus[i].category == Category::Pedestrian ? 1 : 0;
  }
  set.normalized = true;
  set.source = EmbeddingSource::Pseudo;
  return set;
}

void normalize_rows(AppearanceKnowledgeSet& set) {
  for (Index r = 0; r < set.count(); ++r) {
    Eigen::RowVectorXd row = set.data.row(r).cast<double>();
    const double n = row.norm();
    require(n > 0.0, "normalize_rows: zero row " + std::to_string(r));
    set.data.row(r) = (row / n).cast<float>();
  }
  set.normalized = true;
}

std::vector<std::byte> encode_container(const MatrixF& rows, const std::vector<std::uint8_t>* labels,
                                        std::uint8_t extra_flags) {
  if (labels && static_cast<Index>(labels->size()) != rows.rows())
    throw PreconditionError("encode_container: label count differs from row count");
  std::vector<std::byte> out;
  out.reserve(kHeaderSize + (labels ? labels->size() : 0) + 4 * static_cast<std::size_t>(rows.size()));
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(rows.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rows.cols()));
  const std::uint8_t flags = static_cast<std::uint8_t>((extra_flags & ~kFlagLabels) | (labels ? kFlagLabels : 0));
  out.push_back(static_cast<std::byte>(flags));
  if (labels)
    for (std::uint8_t l : *labels) out.push_back(static_cast<std::byte>(l));
  for (Index i = 0; i < rows.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, rows.data() + i, 4);
    put_le<std::uint32_t>(out, bits);
  }
  return out;
}

Container decode_container(std::span<const std::byte> bytes, std::size_t& offset) {
  need(bytes, offset, 4, "magic");
  if (std::memcmp(bytes.data() + offset, kMagic, 4) != 0) throw FormatError(FormatErrc::BadMagic, "LDAE: bad magic");
  need(bytes, offset, kHeaderSize, "header");
  const auto version = get_le<std::uint32_t>(bytes, offset + 4);
  if (version != kContainerVersion)
    throw FormatError(FormatErrc::VersionMismatch, "LDAE: unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint64_t>(bytes, offset + 8);
  const auto dim = get_le<std::uint32_t>(bytes, offset + 16);
  const auto flags = static_cast<std::uint8_t>(bytes[offset + 20]);

  std::uint64_t cells = 0, payload = 0;
  if ((dim == 0 && count != 0) || __builtin_mul_overflow(count, static_cast<std::uint64_t>(dim), &cells) ||
      __builtin_mul_overflow(cells, std::uint64_t{4}, &payload) ||
      cells > static_cast<std::uint64_t>(std::numeric_limits<Index>::max()))
    throw FormatError(FormatErrc::DimCountOverflow,
                      "LDAE: count " + std::to_string(count) + " x dim " + std::to_string(dim) + " is not representable");
  const std::uint64_t label_bytes = (flags & kFlagLabels) ? count : 0;
  std::uint64_t total = 0;
  if (__builtin_add_overflow(payload, label_bytes, &total))
    throw FormatError(FormatErrc::DimCountOverflow, "LDAE: payload size overflows");

  std::size_t at = offset + kHeaderSize;
  if (bytes.size() - at < total) throw FormatError(FormatErrc::Truncated, "LDAE: truncated payload");

  Container c;
  c.flags = flags;
  if (flags & kFlagLabels) {
    std::vector<std::uint8_t> labels(count);
    for (std::uint64_t i = 0; i < count; ++i) labels[i] = static_cast<std::uint8_t>(bytes[at + i]);
    c.labels = std::move(labels);
    at += count;
  }
  c.rows.resize(static_cast<Index>(count), static_cast<Index>(dim));
  for (Index i = 0; i < c.rows.size(); ++i) {
    const auto bits = get_le<std::uint32_t>(bytes, at + 4 * static_cast<std::size_t>(i));
    std::memcpy(c.rows.data() + i, &bits, 4);
  }
  offset = at + payload;
  return c;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::Io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  // Write to a sibling temp file and rename so readers never see a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrc::Io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrc::Io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_embeddings(const AppearanceKnowledgeSet& set, const std::filesystem::path& path) {
  set.validate();
  std::uint8_t flags = 0;
  if (set.normalized) flags |= kFlagNormalized;
  if (set.source == EmbeddingSource::Pseudo) flags |= kFlagPseudo;
  write_file_bytes(path, encode_container(set.data, &set.labels, flags));
}

AppearanceKnowledgeSet load_embeddings(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  Container c = decode_container(bytes, offset);
  if (offset != bytes.size()) throw FormatError(FormatErrc::TrailingData, "LDAE: trailing bytes after payload");
  if (!c.labels) throw PreconditionError("load_embeddings: " + path.string() + " carries no labels");
  AppearanceKnowledgeSet set;
  set.data = std::move(c.rows);
  set.labels = std::move(*c.labels);
  set.normalized = (c.flags & kFlagNormalized) != 0;
  set.source = (c.flags & kFlagPseudo) ? EmbeddingSource::Pseudo : EmbeddingSource::Bridge;
  return set;
}

void save_matrix(const std::filesystem::path& path, const Matrix& m, const std::vector<std::uint8_t>* labels) {
  write_file_bytes(path, encode_container(m.cast<float>(), labels, 0));
}

Container load_matrix(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  Container c = decode_container(bytes, offset);
  if (offset != bytes.size()) throw FormatError(FormatErrc::TrailingData, "LDAE: trailing bytes after payload");
  return c;
}

void save_bundle(const std::filesystem::path& path, std::span<const NamedMatrix> sections) {
  std::vector<std::byte> out;
  for (char c : kBundleMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    for (char c : s.name) out.push_back(static_cast<std::byte>(c));
    const auto block = encode_container(s.value.cast<float>(), nullptr, 0);
    out.insert(out.end(), block.begin(), block.end());
  }
  write_file_bytes(path, out);
}

std::vector<NamedMatrix> load_bundle(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::span<const std::byte> in(bytes);
  need(in, 0, 12, "bundle header");
  if (std::memcmp(in.data(), kBundleMagic, 4) != 0) throw FormatError(FormatErrc::BadMagic, "LDAB: bad magic");
  if (get_le<std::uint32_t>(in, 4) != kContainerVersion)
    throw FormatError(FormatErrc::VersionMismatch, "LDAB: unsupported version");
  const auto n = get_le<std::uint32_t>(in, 8);
  std::size_t offset = 12;
  std::vector<NamedMatrix> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    need(in, offset, 4, "section name length");
    const auto len = get_le<std::uint32_t>(in, offset);
    offset += 4;
    need(in, offset, len, "section name");
    NamedMatrix s;
    s.name.assign(reinterpret_cast<const char*>(in.data() + offset), len);
    offset += len;
    s.value = decode_container(in, offset).rows.cast<double>();
    out.push_back(std::move(s));
  }
  if (offset != in.size()) throw FormatError(FormatErrc::TrailingData, "LDAB: trailing bytes");
  return out;
}

}  // namespace lde
