#include "lde/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "lde/digest.hpp"
#include "lde/embedding.hpp"
#include "lde/gradcheck.hpp"

namespace lde {
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json opt_path(const std::optional<fs::path>& p) { return p ? ordered_json(p->string()) : ordered_json(nullptr); }

ordered_json config_json(const PipelineConfig& c) {
  ordered_json j;
  j["corpus"] = {{"n_ped", c.corpus.n_ped},
                 {"n_bg", c.corpus.n_bg},
                 {"seed", c.corpus.seed},
                 {"external_bg_file", opt_path(c.corpus.external_bg_file)}};
  j["embedding"] = {{"provider", c.embedding.provider},
                    {"dim", c.embedding.dim},
                    {"normalize", c.embedding.normalize},
                    {"seed", c.embedding.seed},
                    {"file", opt_path(c.embedding.file)}};
  j["cluster"] = {{"k", c.cluster.k},
                  {"seed", c.cluster.seed},
                  {"max_iters", c.cluster.max_iters},
                  {"rel_tol", c.cluster.rel_tol},
                  {"threads", c.cluster.threads}};
  j["tune"] = {{"lr", c.tune.lr},
               {"epochs", c.tune.epochs},
               {"batch", c.tune.batch},
               {"h", c.tune.hidden},
               {"seed", c.tune.seed},
               {"strict_prompts_only", c.tune.strict_prompts_only}};
  j["integrate"] = {{"d_v", c.integrate.visual_dim},
                    {"d_m", c.integrate.model_dim},
                    {"heads", c.integrate.heads},
                    {"lambda_ref", c.integrate.lambda_ref},
                    {"strict_single_softmax", c.integrate.strict_single_softmax},
                    {"biases", c.integrate.biases}};
  j["toy"] = {{"n", c.toy.data.n},
              {"n_train", c.toy.train.n_train},
              {"sigma_v", c.toy.data.sigma_v},
              {"seed", c.toy.data.seed},
              {"epochs", c.toy.train.epochs},
              {"batch", c.toy.train.batch},
              {"lr", c.toy.train.lr},
              {"seeds", c.toy.seeds},
              {"ks", c.toy.ks}};
  j["gradcheck"] = {{"seeds", c.gradcheck_seeds}};
  return j;
}

bool compatible(const ordered_json& slot, const ordered_json& value, bool nullable) {
  if (value.is_null()) return nullable;
  if (slot.is_number()) return value.is_number();
  if (slot.is_null()) return value.is_string();
  return slot.type() == value.type();
}

// Nullable leaves are the optional paths; everything else keeps its default type.
void merge(ordered_json& dst, const ordered_json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [key, value] : src.items()) {
    const std::string at = path.empty() ? key : path + "." + key;
    if (!dst.contains(key)) throw ConfigError(at, "unknown field");
    ordered_json& slot = dst[key];
    if (slot.is_object()) {
      merge(slot, value, at);
      continue;
    }
    const bool nullable = key == "external_bg_file" || key == "file";
    if (!compatible(slot, value, nullable)) throw ConfigError(at, "wrong type " + std::string(value.type_name()));
    slot = value;
  }
}

std::uint64_t get_u(const ordered_json& j, const std::string& block, const char* key) {
  const auto& v = j.at(block).at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(block + "." + key, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double get_d(const ordered_json& j, const std::string& block, const char* key) {
  return j.at(block).at(key).get<double>();
}

std::optional<fs::path> get_path(const ordered_json& j, const std::string& block, const char* key) {
  const auto& v = j.at(block).at(key);
  if (v.is_null()) return std::nullopt;
  return fs::path(v.get<std::string>());
}

template <class T>
std::vector<T> get_list(const ordered_json& j, const std::string& block, const char* key) {
  std::vector<T> out;
  std::size_t i = 0;
  for (const auto& v : j.at(block).at(key)) {
    if (!v.is_number_unsigned())
      throw ConfigError(block + "." + key + "[" + std::to_string(i) + "]", "expected a non-negative integer");
    out.push_back(v.get<T>());
    ++i;
  }
  return out;
}

PipelineConfig from_json(const ordered_json& j) {
  PipelineConfig c;
  c.corpus.n_ped = get_u(j, "corpus", "n_ped");
  c.corpus.n_bg = get_u(j, "corpus", "n_bg");
  c.corpus.seed = get_u(j, "corpus", "seed");
  c.corpus.external_bg_file = get_path(j, "corpus", "external_bg_file");
  c.embedding.provider = j["embedding"]["provider"].get<std::string>();
  c.embedding.dim = get_u(j, "embedding", "dim");
  c.embedding.normalize = j["embedding"]["normalize"].get<bool>();
  c.embedding.seed = get_u(j, "embedding", "seed");
  c.embedding.file = get_path(j, "embedding", "file");
  c.cluster.k = get_u(j, "cluster", "k");
  c.cluster.seed = get_u(j, "cluster", "seed");
  c.cluster.max_iters = get_u(j, "cluster", "max_iters");
  c.cluster.rel_tol = get_d(j, "cluster", "rel_tol");
  c.cluster.threads = get_u(j, "cluster", "threads");
  c.tune.lr = get_d(j, "tune", "lr");
  c.tune.epochs = get_u(j, "tune", "epochs");
  c.tune.batch = get_u(j, "tune", "batch");
  c.tune.hidden = get_u(j, "tune", "h");
  c.tune.seed = get_u(j, "tune", "seed");
  c.tune.strict_prompts_only = j["tune"]["strict_prompts_only"].get<bool>();
  c.integrate.visual_dim = get_u(j, "integrate", "d_v");
  c.integrate.model_dim = get_u(j, "integrate", "d_m");
  c.integrate.heads = get_u(j, "integrate", "heads");
  c.integrate.lambda_ref = get_d(j, "integrate", "lambda_ref");
  c.integrate.strict_single_softmax = j["integrate"]["strict_single_softmax"].get<bool>();
  c.integrate.biases = j["integrate"]["biases"].get<bool>();
  c.toy.data.n = get_u(j, "toy", "n");
  c.toy.train.n_train = get_u(j, "toy", "n_train");
  c.toy.data.sigma_v = get_d(j, "toy", "sigma_v");
  c.toy.data.seed = get_u(j, "toy", "seed");
  c.toy.train.epochs = get_u(j, "toy", "epochs");
  c.toy.train.batch = get_u(j, "toy", "batch");
  c.toy.train.lr = get_d(j, "toy", "lr");
  c.toy.seeds = get_list<std::uint64_t>(j, "toy", "seeds");
  c.toy.ks = get_list<std::size_t>(j, "toy", "ks");
  c.gradcheck_seeds = get_u(j, "gradcheck", "seeds");
  // Derived links between blocks.
  c.toy.data.visual_dim = c.integrate.visual_dim;
  c.toy.data.embed_dim = c.embedding.dim;
  c.toy.data.embed_seed = c.embedding.seed;
  c.integrate.element_dim = c.embedding.dim;
  c.toy.train.integration = c.integrate;
  return c;
}

void check(bool ok, const char* path, const char* what) {
  if (!ok) throw ConfigError(path, what);
}

// ---------------------------------------------------------------------------
// Artifacts and manifest.

struct Artifact {
  const char* name;
  const char* producer;
};

constexpr Artifact kCorpus{"corpus.jsonl", "gen-corpus"};
constexpr Artifact kEmbeddings{"embeddings.ldae", "encode"};
constexpr Artifact kCentroids{"centroids.ldae", "cluster"};
constexpr Artifact kAssignments{"assignments.json", "cluster"};
constexpr Artifact kElements{"elements.ldae", "tune"};
constexpr Artifact kManifest{"manifest.jsonl", "gen-corpus"};

fs::path need(const StageOptions& o, const Artifact& a) {
  const fs::path p = o.out / a.name;
  if (!fs::exists(p)) throw DependencyError(a.producer, std::string("missing input ") + p.string());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

std::vector<ordered_json> read_manifest(const fs::path& out) {
  std::vector<ordered_json> lines;
  std::ifstream in(out / kManifestName);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(ordered_json::parse(line));
  return lines;
}

void append_manifest(const fs::path& out, const ordered_json& entry) {
  std::ofstream f(out / kManifestName, std::ios::app);
  f << entry.dump() << '\n';
  if (!f) throw Error("cannot append to manifest in " + out.string());
}

std::map<std::string, std::string> digests(const std::vector<fs::path>& files) {
  std::map<std::string, std::string> out;
  for (const auto& f : files) out[f.filename().string()] = file_digest(f);
  return out;
}

std::vector<std::uint8_t> category_labels(const std::vector<Description>& corpus) {
  std::vector<std::uint8_t> labels(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) labels[i] = corpus[i].category == Category::Pedestrian ? 1 : 0;
  return labels;
}

std::vector<std::size_t> read_assignments(const fs::path& path) {
  return ordered_json::parse(read_text(path)).at("dot").get<std::vector<std::size_t>>();
}

// Stage bodies receive resolved inputs and return the files they wrote.
struct StagePlan {
  std::string block;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
};

StagePlan plan(std::string_view stage, const PipelineConfig& c, const StageOptions& o) {
  const fs::path& out = o.out;
  if (stage == "gen-corpus") {
    StagePlan p{"corpus", {}, {out / kCorpus.name}};
    if (c.corpus.external_bg_file) p.inputs.push_back(*c.corpus.external_bg_file);
    return p;
  }
  if (stage == "encode") {
    StagePlan p{"embedding", {need(o, kCorpus)}, {out / kEmbeddings.name}};
    if (c.embedding.file) p.inputs.push_back(*c.embedding.file);
    return p;
  }
  if (stage == "cluster")
    return {"cluster", {need(o, kEmbeddings)}, {out / kCentroids.name, out / kAssignments.name, out / "cluster.json"}};
  if (stage == "tune")
    return {"tune",
            {need(o, kEmbeddings), need(o, kCentroids), need(o, kAssignments)},
            {out / "prompts.ldae", out / kElements.name, out / "head.ldab", out / "tune_loss.csv"}};
  if (stage == "analyze")
    return {"cluster",
            {need(o, kCorpus), need(o, kCentroids), need(o, kAssignments)},
            {out / "attribute_report.json", out / "elements_summary.json"}};
  if (stage == "train-toy")
    return {"toy",
            {need(o, kElements)},
            {out / "toy_runs.json", out / "toy_summary.json", out / "toy_weights.ldab", out / "overhead.json"}};
  if (stage == "sweep")
    return {"sweep",
            {need(o, kEmbeddings)},
            {out / "sweep.csv", out / "sweep_summary.json", out / "sweep.svg", out / "sweep_partitions.json"}};
  if (stage == "gradcheck") return {"gradcheck", {}, {out / "gradcheck.json"}};
  if (stage == "report") return {"all", {need(o, kManifest)}, {out / "report.md"}};
  throw ConfigError("stage", "unknown stage " + std::string(stage));
}

// ---------------------------------------------------------------------------

void stage_gen_corpus(const PipelineConfig& c, const StageOptions& o) {
  const Corpus corpus = generate_corpus(c.corpus, build_lexicon());
  write_corpus(o.out / kCorpus.name, corpus.descriptions);
}

void stage_encode(const PipelineConfig& c, const StageOptions& o) {
  const auto corpus = read_corpus(o.out / kCorpus.name);
  AppearanceKnowledgeSet set;
  if (c.embedding.provider == "pseudo") {
    set = encode_corpus(corpus, c.embedding.dim, c.embedding.seed, build_lexicon());
  } else {
    set = load_embeddings(*c.embedding.file);
    if (static_cast<std::size_t>(set.count()) != corpus.size())
      throw PreconditionError("embedding.file: " + std::to_string(set.count()) + " rows for " +
                              std::to_string(corpus.size()) + " corpus lines");
    if (static_cast<std::size_t>(set.dim()) != c.embedding.dim)
      throw ConfigError("embedding.dim", "file has dimension " + std::to_string(set.dim()));
    if (set.labels != category_labels(corpus))
      throw PreconditionError("embedding.file: labels do not match corpus categories");
  }
  if (c.embedding.normalize) normalize_rows(set);
  set.validate();
  save_embeddings(set, o.out / kEmbeddings.name);
}

void stage_cluster(const PipelineConfig& c, const StageOptions& o) {
  const AppearanceKnowledgeSet set = load_embeddings(o.out / kEmbeddings.name);
  const Matrix data = set.as_double();
  const CentroidSet cs = kmeans(data, c.cluster);
  // Downstream stages read the float32 file; assign against exactly those values.
  const Matrix stored = cs.centroids.cast<float>().cast<double>();
  const auto dot = assign_all(data, stored);
  const auto euclid = assign_euclidean(data, stored);
  const ElementPartition part = label_elements(dot, set.labels, c.cluster.k);
  save_matrix(o.out / kCentroids.name, stored, &part.labels);
  std::size_t disagree = 0;
  for (std::size_t i = 0; i < dot.size(); ++i) disagree += dot[i] != euclid[i] ? 1 : 0;
  ordered_json a;
  a["dot"] = dot;
  a["euclidean"] = euclid;
  a["disagreements"] = disagree;
  write_text(o.out / kAssignments.name, a.dump() + "\n");
  ordered_json s;
  s["k"] = c.cluster.k;
  s["iterations"] = cs.iterations;
  s["fixed_point"] = cs.fixed_point;
  s["objective"] = cs.objective;
  s["objective_history"] = cs.objective_history;
  s["source_digest"] = cs.source_digest;
  s["pedestrian_fraction"] = part.pedestrian_fraction();
  s["assignment_disagreements"] = disagree;
  write_text(o.out / "cluster.json", s.dump(2) + "\n");
}

void stage_tune(const PipelineConfig& c, const StageOptions& o) {
  const AppearanceKnowledgeSet set = load_embeddings(o.out / kEmbeddings.name);
  const Container cent = load_matrix(o.out / kCentroids.name);
  const Matrix centroids = cent.rows.cast<double>();
  const auto assignments = read_assignments(o.out / kAssignments.name);
  if (assignments.size() != static_cast<std::size_t>(set.count()))
    throw DependencyError("cluster", "assignments do not match the embedding file; rerun cluster");
  const TuneResult r = prompt_tune(set.labels, centroids, assignments, c.tune);
  const ElementSet e = compose_elements(centroids, r.prompts.prompts, *cent.labels);
  save_matrix(o.out / "prompts.ldae", r.prompts.prompts, nullptr);
  save_matrix(o.out / kElements.name, e.elements, &e.partition);
  const std::vector<NamedMatrix> head = {{"w1", r.head.w1}, {"b1", r.head.b1}, {"w2", r.head.w2}, {"b2", r.head.b2}};
  save_bundle(o.out / "head.ldab", head);
  write_text(o.out / "tune_loss.csv", loss_curve_csv(r.loss_curve));
}

void stage_analyze(const PipelineConfig& c, const StageOptions& o) {
  const auto corpus = read_corpus(o.out / kCorpus.name);
  const auto assignments = read_assignments(o.out / kAssignments.name);
  const Container cent = load_matrix(o.out / kCentroids.name);
  const std::size_t k = static_cast<std::size_t>(cent.rows.rows());
  if (assignments.size() != corpus.size())
    throw DependencyError("cluster", "assignments do not match the corpus; rerun encode and cluster");
  const ElementPartition part = label_elements(assignments, category_labels(corpus), k);
  const auto report = attribute_report(part, corpus, assignments, build_lexicon());
  write_text(o.out / "attribute_report.json", attribute_report_json(report) + "\n");
  ordered_json s;
  s["k"] = k;
  s["pedestrian_elements"] = part.pedestrian_elements().size();
  s["background_elements"] = part.background_elements().size();
  s["pedestrian_fraction"] = part.pedestrian_fraction();
  s["partition_matches_centroid_file"] = cent.labels && *cent.labels == part.labels;
  (void)c;
  write_text(o.out / "elements_summary.json", s.dump(2) + "\n");
}

void stage_train_toy(const PipelineConfig& c, const StageOptions& o) {
  const Container el = load_matrix(o.out / kElements.name);
  ElementSet elements;
  elements.elements = el.rows.cast<double>();
  elements.partition = *el.labels;
  const ToyDataset data = synth_dataset(c.toy.data, build_lexicon());
  ordered_json runs = ordered_json::array();
  ordered_json paired = ordered_json::array();
  std::optional<ToyRun> first_with, first_without;
  double acc_with = 0.0, acc_without = 0.0;
  for (std::uint64_t seed : c.toy.seeds) {
    ToyTrainConfig t = c.toy.train;
    t.seed = seed;
    ToyRun base = train_toy(data, nullptr, t);
    ToyRun with = train_toy(data, &elements, t);
    runs.push_back(ordered_json::parse(toy_run_json(base)));
    runs.push_back(ordered_json::parse(toy_run_json(with)));
    paired.push_back({{"seed", seed},
                      {"baseline_accuracy", base.final().accuracy},
                      {"elements_accuracy", with.final().accuracy},
                      {"baseline_ap", base.final().average_precision},
                      {"elements_ap", with.final().average_precision},
                      {"initial_correct_mass", with.epochs.front().correct_mass},
                      {"final_correct_mass", with.final().correct_mass},
                      {"final_pedestrian_mass", with.final().pedestrian_mass},
                      {"final_background_mass", with.final().background_mass}});
    acc_with += with.final().accuracy;
    acc_without += base.final().accuracy;
    if (!first_with) {
      first_with = std::move(with);
      first_without = std::move(base);
    }
  }
  write_text(o.out / "toy_runs.json", runs.dump(2) + "\n");
  ordered_json summary;
  summary["k"] = elements.k();
  summary["seeds"] = paired;
  const double n = static_cast<double>(c.toy.seeds.size());
  summary["baseline_accuracy_mean"] = acc_without / n;
  summary["elements_accuracy_mean"] = acc_with / n;
  write_text(o.out / "toy_summary.json", summary.dump(2) + "\n");
  std::vector<NamedMatrix> weights = first_with->model.integration->named();
  weights.push_back({"w_cls", first_with->model.w_cls});
  weights.push_back({"b_cls", first_with->model.b_cls});
  save_bundle(o.out / "toy_weights.ldab", weights);
  write_text(o.out / "overhead.json", overhead_json(overhead_report(first_with->model, first_without->model)));
}

void stage_sweep(const PipelineConfig& c, const StageOptions& o) {
  const AppearanceKnowledgeSet set = load_embeddings(o.out / kEmbeddings.name);
  const ToyDataset data = synth_dataset(c.toy.data, build_lexicon());
  SweepConfig s;
  s.ks = c.toy.ks;
  s.seeds = c.toy.seeds;
  s.kmeans = c.cluster;
  s.tune = c.tune;
  s.toy = c.toy.train;
  s.jobs = o.jobs;
  const SweepTable t = ablation_k_sweep(set, data, s);
  write_text(o.out / "sweep.csv", sweep_csv(t));
  write_text(o.out / "sweep_summary.json", sweep_summary_json(t));
  write_text(o.out / "sweep.svg", sweep_svg(t));
  ordered_json parts = ordered_json::array();
  for (const auto& r : t.rows)
    parts.push_back({{"k", r.k}, {"seed", r.seed}, {"assignments", r.assignments}, {"partition", r.partition}});
  write_text(o.out / "sweep_partitions.json", parts.dump() + "\n");
}

void stage_gradcheck(const PipelineConfig& c, const StageOptions& o) {
  const auto cases = gradcheck_suite(c.gradcheck_seeds);
  write_text(o.out / "gradcheck.json", gradcheck_json(cases));
  for (const auto& k : cases)
    if (!k.passed())
      throw CheckFailure("gradcheck: " + k.path + " seed " + std::to_string(k.seed) + " relative error " +
                         std::to_string(k.report.max_rel_error));
}

void stage_report(const PipelineConfig& c, const StageOptions& o) {
  std::ostringstream md;
  md << "# Pipeline report\n\n## Stages\n\n| stage | wall s | outputs |\n|---|---|---|\n";
  for (const auto& e : read_manifest(o.out)) {
    md << "| " << e["stage"].get<std::string>() << " | " << e["wall_seconds"].get<double>() << " | ";
    for (const auto& [name, d] : e["outputs"].items()) md << name << " `" << d.get<std::string>().substr(0, 12) << "` ";
    md << "|\n";
  }
  auto section = [&](const char* title, const char* file) {
    const fs::path p = o.out / file;
    if (!fs::exists(p)) return;
    md << "\n## " << title << "\n\n```\n" << read_text(p) << "```\n";
  };
  section("Elements", "elements_summary.json");
  section("Toy runs", "toy_summary.json");
  section("Parameter overhead", "overhead.json");
  section("K sweep", "sweep.csv");
  section("K sweep summary", "sweep_summary.json");
  if (fs::exists(o.out / "gradcheck.json")) {
    const auto g = ordered_json::parse(read_text(o.out / "gradcheck.json"));
    double worst = 0.0;
    for (const auto& x : g) worst = std::max(worst, x["max_rel_error"].get<double>());
    md << "\n## Gradient checks\n\n" << g.size() << " cases, worst relative error " << worst << "\n";
  }
  md << "\n## Configuration\n\n```json\n" << c.to_json() << "```\n";
  write_text(o.out / "report.md", md.str());
}

}  // namespace

PipelineConfig::PipelineConfig() {
  integrate.lambda_ref = kToyLambdaRef;
  toy.data.seed = 7;
  integrate.element_dim = embedding.dim;
  toy.train.integration = integrate;
}

std::string PipelineConfig::to_json() const { return config_json(*this).dump(2) + "\n"; }

std::string PipelineConfig::block_digest(std::string_view block) const {
  const ordered_json j = config_json(*this);
  if (block == "all") return sha256_hex(j.dump());
  // Later stages depend on every upstream block, so their digest covers all of them.
  static const std::vector<std::string> order = {"corpus", "embedding", "cluster", "tune", "integrate", "toy"};
  ordered_json part;
  if (block == "gradcheck") {
    part["gradcheck"] = j["gradcheck"];
  } else if (block == "sweep") {
    for (const auto& b : order) part[b] = j[b];
  } else {
    for (const auto& b : order) {
      part[b] = j[b];
      if (b == block) break;
    }
  }
  return sha256_hex(part.dump());
}

PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides) {
  ordered_json j = config_json(PipelineConfig());
  if (!json_text.empty()) {
    ordered_json user;
    try {
      user = ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    merge(j, user, "");
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(o, "override must look like key.path=value");
    const std::string path = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    ordered_json value;
    try {
      value = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    ordered_json patch = value;
    std::string rest = path;
    std::vector<std::string> keys;
    for (std::size_t at = 0;;) {
      const auto dot = rest.find('.', at);
      keys.push_back(rest.substr(at, dot - at));
      if (dot == std::string::npos) break;
      at = dot + 1;
    }
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = ordered_json{{*it, patch}};
    merge(j, patch, "");
  }
  PipelineConfig c;
  try {
    c = from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("<config>", e.what());
  }
  validate_config(c);
  return c;
}

void validate_config(const PipelineConfig& c) {
  check(c.corpus.n_ped + c.corpus.n_bg >= 1, "corpus.n_ped", "corpus must not be empty");
  check(c.embedding.provider == "pseudo" || c.embedding.provider == "file", "embedding.provider",
        "must be \"pseudo\" or \"file\"");
  check(c.embedding.dim >= 8, "embedding.dim", "must be >= 8");
  check(c.embedding.provider != "file" || c.embedding.file.has_value(), "embedding.file",
        "required when provider is \"file\"");
  check(c.cluster.k >= 1, "cluster.k", "must be >= 1");
  check(c.cluster.k <= c.corpus.n_ped + c.corpus.n_bg, "cluster.k", "must not exceed the corpus size");
  check(c.cluster.max_iters >= 1, "cluster.max_iters", "must be >= 1");
  check(c.cluster.rel_tol >= 0.0, "cluster.rel_tol", "must be >= 0");
  check(c.cluster.threads >= 1, "cluster.threads", "must be >= 1");
  check(c.tune.lr > 0.0, "tune.lr", "must be > 0");
  check(c.tune.batch >= 1, "tune.batch", "must be >= 1");
  check(c.tune.hidden >= 1, "tune.h", "must be >= 1");
  check(c.integrate.visual_dim >= 8, "integrate.d_v", "must be >= 8");
  check(c.integrate.model_dim >= 1, "integrate.d_m", "must be >= 1");
  check(c.integrate.heads >= 1, "integrate.heads", "must be >= 1");
  check(c.integrate.model_dim % c.integrate.heads == 0, "integrate.heads", "must divide d_m");
  check(c.integrate.lambda_ref >= 0.0, "integrate.lambda_ref", "must be >= 0");
  check(c.toy.data.n >= 2, "toy.n", "must be >= 2");
  check(c.toy.train.n_train >= 1 && c.toy.train.n_train < c.toy.data.n, "toy.n_train", "must lie in [1, n)");
  check(c.toy.data.sigma_v >= 0.0, "toy.sigma_v", "must be >= 0");
  check(c.toy.train.batch >= 1, "toy.batch", "must be >= 1");
  check(c.toy.train.lr > 0.0, "toy.lr", "must be > 0");
  check(!c.toy.seeds.empty(), "toy.seeds", "must not be empty");
  check(!c.toy.ks.empty(), "toy.ks", "must not be empty");
  for (std::size_t k : c.toy.ks)
    check(k <= c.corpus.n_ped + c.corpus.n_bg, "toy.ks", "K must not exceed the corpus size");
  check(c.gradcheck_seeds >= 1, "gradcheck.seeds", "must be >= 1");
}

StageResult run_stage(std::string_view stage, const PipelineConfig& config, const StageOptions& options) {
  validate_config(config);
  if (config.corpus.external_bg_file && !fs::exists(*config.corpus.external_bg_file))
    throw ConfigError("corpus.external_bg_file", "file not found: " + config.corpus.external_bg_file->string());
  if (config.embedding.provider == "file" && !fs::exists(*config.embedding.file))
    throw ConfigError("embedding.file", "file not found: " + config.embedding.file->string());
  fs::create_directories(options.out);

  const StagePlan p = plan(stage, config, options);
  const std::string config_digest = config.block_digest(p.block);
  const auto inputs = digests(p.inputs);

  StageResult result;
  result.stage = std::string(stage);
  for (const auto& f : p.outputs) result.outputs.push_back(f.filename().string());

  if (!options.force && stage != "report") {
    const auto manifest = read_manifest(options.out);
    for (auto it = manifest.rbegin(); it != manifest.rend(); ++it) {
      if ((*it)["stage"] != stage) continue;
      bool same = (*it)["config_digest"] == config_digest &&
                  (*it)["inputs"].get<std::map<std::string, std::string>>() == inputs;
      for (const auto& f : p.outputs) {
        const auto name = f.filename().string();
        same = same && fs::exists(f) && (*it)["outputs"].contains(name) && (*it)["outputs"][name] == file_digest(f);
      }
      if (same) {
        result.skipped = true;
        return result;
      }
      break;
    }
  }

  const auto start = std::chrono::steady_clock::now();
  auto finish = [&] {
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ordered_json entry;
    entry["stage"] = stage;
    entry["config_digest"] = config_digest;
    entry["inputs"] = inputs;
    entry["outputs"] = digests(p.outputs);
    entry["wall_seconds"] = result.wall_seconds;
    append_manifest(options.out, entry);
  };

  if (stage == "gen-corpus") stage_gen_corpus(config, options);
  else if (stage == "encode") stage_encode(config, options);
  else if (stage == "cluster") stage_cluster(config, options);
  else if (stage == "tune") stage_tune(config, options);
  else if (stage == "analyze") stage_analyze(config, options);
  else if (stage == "train-toy") stage_train_toy(config, options);
  else if (stage == "sweep") stage_sweep(config, options);
  else if (stage == "report") stage_report(config, options);
  else if (stage == "gradcheck") {
    try {
      stage_gradcheck(config, options);
    } catch (const CheckFailure&) {
      finish();
      throw;
    }
  }
  finish();
  return result;
}

}  // namespace lde
