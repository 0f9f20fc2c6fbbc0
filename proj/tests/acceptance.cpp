#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>

#include "lde/gradcheck.hpp"
#include "lde/pipeline.hpp"

using namespace lde;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [violated: " << what << "]";
    }
  }
};

Matrix randn(Index r, Index c, RngStream& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

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

// Shared by the tuning, element-balance and sweep criteria.
struct Defaults {
  PipelineConfig config = parse_config("");
  AttributeLexicon lex = build_lexicon();
  Corpus corpus;
  AppearanceKnowledgeSet knowledge;
  Matrix data;

  Defaults() {
    corpus = generate_corpus(config.corpus, lex);
    knowledge = encode_corpus(corpus.descriptions, config.embedding.dim, config.embedding.seed, lex);
    if (config.embedding.normalize) normalize_rows(knowledge);
    data = knowledge.as_double();
  }
};

const Defaults& defaults() {
  static const Defaults d;
  return d;
}

struct Clustered {
  CentroidSet centroids;
  std::vector<std::size_t> assignments;
  ElementPartition partition;
};

const Clustered& default_clusters() {
  static const Clustered c = [] {
    const Defaults& d = defaults();
    Clustered r;
    r.centroids = kmeans(d.data, d.config.cluster);
    r.assignments = assign_all(d.data, r.centroids.centroids);
    r.partition = label_elements(r.assignments, d.knowledge.labels, d.config.cluster.k);
    return r;
  }();
  return c;
}

void gradient_fidelity(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto cases = gradcheck_suite(20);
  const double elapsed = seconds_since(start);
  double worst = 0;
  std::string worst_path;
  std::set<std::string> paths;
  for (const auto& c : cases) {
    paths.insert(c.path);
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      worst_path = c.path;
    }
  }
  o.detail << cases.size() << " cases over " << paths.size() << " paths x 20 seeds, worst rel err " << worst << " ("
           << worst_path << "), " << elapsed << " s";
  o.expect(worst <= kGradTolerance, "max relative error <= 1e-4");
  o.expect(elapsed < 60.0, "runtime < 60 s");
  for (const char* p : {"classifier_head", "prompts", "integration", "reference_loss", "total_loss"})
    o.expect(paths.count(p) == 1, std::string("path ") + p + " covered");
}

void assignment_oracle(Outcome& o) {
  RngStream rng(2024);
  std::size_t mismatches = 0, probes = 0;
  for (Index k : {5, 50, 400}) {
    const Matrix c = randn(k, 128, rng);
    for (int p = 0; p < 1000; ++p) {
      const Matrix s = randn(1, 128, rng);
      std::size_t best = 0;
      double best_v = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < k; ++i) {
        double v = 0;
        for (Index j = 0; j < 128; ++j) v += s(0, j) * c(i, j);
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::size_t>(i);
        }
      }
      mismatches += assign(std::span<const double>(s.data(), 128), c) == best ? 0 : 1;
      ++probes;
    }
  }
  o.detail << probes << " probes over K in {5, 50, 400}, " << mismatches << " mismatches";
  o.expect(mismatches == 0, "exact index equality");
}

void reference_identities(Outcome& o) {
  RngStream rng(7);
  std::size_t exact = 0, total = 0;
  double worst = 0;
  for (std::size_t k : {4u, 50u, 200u}) {
    const std::vector<double> uniform(k, 1.0 / static_cast<double>(k));
    for (int t = 0; t < 50; ++t) {
      std::vector<std::uint8_t> part(k);
      for (auto& p : part) p = rng.coin() ? 1 : 0;
      part[0] = 1;
      part[1] = 0;
      for (bool ped : {true, false}) {
        const double l = reference_loss(uniform, part, ped);
        const double target = 1.0 / static_cast<double>(k);
        exact += l == target ? 1 : 0;
        worst = std::max(worst, std::abs(l - target) / target);
        ++total;
      }
    }
  }
  o.detail << "uniform = 1/K: " << exact << "/" << total << " bit-exact, worst rel dev " << worst;
  o.expect(exact == total, "uniform attention gives exactly 1/K");

  const std::vector<std::uint8_t> part = {1, 1, 0, 0};
  const double hand = reference_loss(std::vector<double>{0.4, 0.3, 0.2, 0.1}, part, true);
  o.detail << "; hand case " << hand;
  o.expect(std::abs(hand - 0.15) <= 1e-15, "[0.4,0.3,0.2,0.1] -> 0.15");
  o.expect(reference_loss(std::vector<double>{0.7, 0.3, 0.0, 0.0}, part, true) == 0.0, "zero on the correct partition");
  o.expect(reference_loss(std::vector<double>{0.0, 0.0, 0.2, 0.8}, part, false) == 0.0, "zero on the correct partition");

  bool strict_equal = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    IntegrationConfig c;
    c.visual_dim = 16;
    c.element_dim = 12;
    c.model_dim = 8;
    c.heads = 1;
    RngStream r(seed);
    const IntegrationModule m = IntegrationModule::init(c, r);
    const Matrix q = randn(9, 16, r);
    const Matrix e = randn(20, 12, r);
    const IntegrationOutput mean_mode = integrate_forward(q, e, m, c);
    c.strict_single_softmax = true;
    const IntegrationOutput strict = integrate_forward(q, e, m, c);
    strict_equal = strict_equal && same_bits(strict.ref_attn, mean_mode.ref_attn);
  }
  o.detail << "; H=1 strict vs head-mean " << (strict_equal ? "bit-identical" : "differ");
  o.expect(strict_equal, "strict and head-mean agree exactly for H=1");
}

void kmeans_properties(Outcome& o) {
  std::size_t runs = 0, violations = 0;
  auto monotone = [&](const CentroidSet& c) {
    ++runs;
    for (std::size_t i = 1; i < c.objective_history.size(); ++i)
      if (c.objective_history[i] > c.objective_history[i - 1]) {
        ++violations;
        return;
      }
  };
  monotone(default_clusters().centroids);

  double min_ari = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed + 100);
    const Index d = 16, per = 200;
    Matrix centers = randn(4, d, rng);
    for (;;) {
      double gap = 1e300;
      for (Index a = 0; a < 4; ++a)
        for (Index b = a + 1; b < 4; ++b) gap = std::min(gap, (centers.row(a) - centers.row(b)).norm());
      if (gap >= 10.0) break;
      centers *= 1.5;
    }
    Matrix x(4 * per, d);
    std::vector<std::size_t> truth;
    for (Index c = 0; c < 4; ++c)
      for (Index i = 0; i < per; ++i) {
        for (Index j = 0; j < d; ++j) x(c * per + i, j) = centers(c, j) + rng.normal();
        truth.push_back(static_cast<std::size_t>(c));
      }
    KMeansOptions opt;
    opt.k = 4;
    opt.seed = seed;
    const CentroidSet c = kmeans(x, opt);
    monotone(c);
    min_ari = std::min(min_ari, adjusted_rand(c.assignments, truth));
  }

  double mean_err = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed);
    const Matrix x = randn(500, 8, rng, 3.0);
    KMeansOptions opt;
    opt.k = 1;
    opt.seed = seed;
    const CentroidSet c = kmeans(x, opt);
    monotone(c);
    mean_err = std::max(mean_err, (c.centroids.row(0) - x.colwise().mean()).cwiseAbs().maxCoeff());
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream rng(seed);
    KMeansOptions opt;
    opt.k = 3 + seed;
    opt.seed = seed;
    opt.rel_tol = 0.0;
    monotone(kmeans(randn(400, 5, rng), opt));
  }
  o.detail << runs << " runs, " << violations << " objective increases; planted min ARI " << min_ari
           << "; K=1 max |centroid - mean| " << mean_err;
  o.expect(violations == 0, "objective non-increasing on every run");
  o.expect(min_ari >= 0.99, "planted-cluster ARI >= 0.99");
  o.expect(mean_err <= 1e-12, "K=1 centroid equals the mean to 1e-12");
}

void corpus_properties(Outcome& o) {
  const Defaults& d = defaults();
  std::size_t conform = 0;
  for (const auto& x : d.corpus.descriptions) conform += validate_description(x.text, d.lex).conforms ? 1 : 0;
  const std::string a = corpus_to_jsonl(d.corpus.descriptions);
  const std::string b = corpus_to_jsonl(generate_corpus(d.config.corpus, d.lex).descriptions);

  std::array<std::size_t, kAttributeTypes.size()> included{};
  std::size_t render_conform = 0;
  for (std::size_t i = 0; i < 10000; ++i) {
    RngStream rng(derive_seed(5, i));
    const Description x = render_pedestrian(rng, d.lex);
    render_conform += validate_description(x.text, d.lex).conforms ? 1 : 0;
    for (const auto& [t, v] : x.attributes) ++included[static_cast<std::size_t>(t)];
  }
  double worst = 0;
  for (auto n : included) worst = std::max(worst, std::abs(static_cast<double>(n) / 10000.0 - 0.5));
  o.detail << "conformance " << conform << "/" << d.corpus.descriptions.size() << " corpus, " << render_conform
           << "/10000 renders; regeneration " << (a == b ? "byte-identical" : "differs")
           << "; worst inclusion-rate deviation " << worst;
  o.expect(conform == d.corpus.descriptions.size() && render_conform == 10000, "100% conformance");
  o.expect(a == b, "byte-identical regeneration");
  o.expect(worst <= 0.02, "inclusion rate 0.5 +- 0.02");
}

void tuning_properties(Outcome& o) {
  const Defaults& d = defaults();
  const Clustered& c = default_clusters();
  const TuneResult r = prompt_tune(d.knowledge.labels, c.centroids.centroids, c.assignments, d.config.tune);
  const ElementSet e = compose_elements(c.centroids.centroids, r.prompts.prompts);
  std::size_t agree = 0;
  for (Index k = 0; k < e.k(); ++k) {
    std::size_t ped = 0, all = 0;
    for (std::size_t j = 0; j < c.assignments.size(); ++j)
      if (c.assignments[j] == static_cast<std::size_t>(k)) {
        ++all;
        ped += d.knowledge.labels[j];
      }
    const bool majority = 2 * ped > all;
    const std::vector<double> row(e.elements.row(k).data(), e.elements.row(k).data() + e.elements.cols());
    agree += (classify_element(row, r.head) >= 0.5) == majority ? 1 : 0;
  }

  TuneOptions zero = d.config.tune;
  zero.epochs = 0;
  const TuneResult z = prompt_tune(d.knowledge.labels, c.centroids.centroids, c.assignments, zero);
  const bool identity = z.prompts.prompts.isZero(0.0) && same_bits(z.head.w1, z.initial_head.w1) &&
                        same_bits(z.head.w2, z.initial_head.w2) && same_bits(z.head.b1, z.initial_head.b1) &&
                        same_bits(z.head.b2, z.initial_head.b2) &&
                        same_bits(compose_elements(c.centroids.centroids, z.prompts.prompts).elements,
                                  c.centroids.centroids);
  o.detail << "final BCE " << r.loss_curve.back() << " after " << r.loss_curve.size() << " epochs; agreement "
           << agree << "/" << e.k() << "; epochs=0 " << (identity ? "identity" : "not identity");
  o.expect(r.loss_curve.back() < 0.1, "final BCE < 0.1");
  o.expect(agree == static_cast<std::size_t>(e.k()), "100% majority agreement");
  o.expect(identity, "epochs=0 is the identity");
}

void element_balance(Outcome& o) {
  const Defaults& d = defaults();
  const Clustered& c = default_clusters();
  const double frac = c.partition.pedestrian_fraction();
  const auto report = attribute_report(c.partition, d.corpus.descriptions, c.assignments, d.lex, 1000);
  std::size_t checked = 0, mismatched = 0;
  for (const auto& r : report)
    for (const auto& f : r.top) {
      const std::regex rx("\\b" + f.value + "\\b");
      std::size_t hits = 0;
      for (std::size_t j = 0; j < c.assignments.size(); ++j)
        if (c.assignments[j] == r.element && std::regex_search(lower(d.corpus.descriptions[j].text), rx)) ++hits;
      mismatched += f.frequency == static_cast<double>(hits) / static_cast<double>(r.members) ? 0 : 1;
      ++checked;
    }
  o.detail << "pedestrian elements " << c.partition.pedestrian_elements().size() << "/" << c.partition.k() << " ("
           << frac << "); recount " << checked - mismatched << "/" << checked << " frequencies match";
  o.expect(frac >= 0.40 && frac <= 0.60, "pedestrian fraction in [0.40, 0.60]");
  o.expect(checked > 0 && mismatched == 0, "report frequencies match the recount");
}

void k_sweep(Outcome& o) {
  const Defaults& d = defaults();
  SweepConfig s;
  s.ks = {0, 100, 200, 300};
  s.seeds = {0, 1, 2};
  s.kmeans = d.config.cluster;
  s.tune = d.config.tune;
  s.toy = d.config.toy.train;
  const ToyDataset data = synth_dataset(d.config.toy.data, d.lex);
  const auto start = std::chrono::steady_clock::now();
  const SweepTable t = ablation_k_sweep(d.knowledge, data, s);
  const double elapsed = seconds_since(start);

  double base = 0, lo = 1, hi = 0, init_lo = 1, init_hi = 0, mass_lo = 1;
  for (const auto& k : s.ks) {
    double acc = 0, mass = 0, init = 0;
    for (const auto& r : t.rows)
      if (r.k == k) {
        acc += r.accuracy / 3;
        mass += r.ref_mass / 3;
        init += r.initial_ref_mass / 3;
      }
    o.detail << "K=" << k << " acc " << acc;
    if (k == 0) {
      base = acc;
    } else {
      o.detail << " mass " << init << "->" << mass;
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
      init_lo = std::min(init_lo, init);
      init_hi = std::max(init_hi, init);
      mass_lo = std::min(mass_lo, mass);
    }
    o.detail << "; ";
  }
  o.detail << "spread " << 100 * (hi - lo) << " pts; " << elapsed << " s";
  o.expect(lo >= base, "every K>0 seed-mean accuracy >= K=0");
  o.expect(hi - lo <= 0.02, "spread across K>0 <= 2.0 points");
  o.expect(init_lo >= 0.45 && init_hi <= 0.55, "initial correct mass about 0.5");
  o.expect(mass_lo >= 0.9, "final correct mass >= 0.9");
}

void parameter_overhead(Outcome& o) {
  IntegrationConfig c;
  c.visual_dim = 64;
  c.element_dim = 768;
  c.model_dim = 64;
  c.heads = 8;
  RngStream rng(1);
  const IntegrationModule m = IntegrationModule::init(c, rng);
  const std::size_t formula = 64 * 64 + 2 * 768 * 64 + 64 * 64 + 2 * 64 + (64 + 64 + 64);
  o.detail << "module params " << m.parameter_count() << " vs formula " << formula;
  o.expect(m.parameter_count() == formula && analytic_parameter_count(c) == formula, "count equals formula");

  const Defaults& d = defaults();
  ToyDataConfig dc = d.config.toy.data;
  dc.n = 600;
  const ToyDataset data = synth_dataset(dc, d.lex);
  ToyTrainConfig tc = d.config.toy.train;
  tc.n_train = 400;
  tc.epochs = 1;
  const Clustered& cl = default_clusters();
  const ElementSet e = compose_elements(cl.centroids.centroids, Matrix::Zero(cl.centroids.centroids.rows(),
                                                                            cl.centroids.centroids.cols()),
                                        cl.partition.labels);
  const auto report = [&] { return overhead_report(train_toy(data, &e, tc).model, train_toy(data, nullptr, tc).model); };
  const OverheadReport r = report();
  const std::string a = overhead_json(r), b = overhead_json(report());
  IntegrationConfig toy = tc.integration;
  toy.visual_dim = static_cast<std::size_t>(data.queries.cols());
  toy.element_dim = static_cast<std::size_t>(e.elements.cols());
  o.detail << "; toy overhead " << r.added_params << "/" << r.baseline_params << ", report "
           << (a == b ? "bit-identical" : "differs") << " across runs";
  o.expect(a == b, "overhead report reproducible bit-for-bit");
  o.expect(r.module_params == analytic_parameter_count(toy), "toy module count equals formula");
}

void file_format(Outcome& o) {
  RngStream rng(3);
  MatrixF m(50, 24);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  m(0, 0) = -0.0f;
  m(0, 1) = std::numeric_limits<float>::denorm_min();
  m(0, 2) = std::numeric_limits<float>::max();
  AppearanceKnowledgeSet s;
  s.data = m;
  s.labels.resize(50);
  for (auto& l : s.labels) l = rng.coin() ? 1 : 0;
  s.source = EmbeddingSource::Pseudo;
  const fs::path path = fs::temp_directory_path() / "lde_acceptance.ldae";
  save_embeddings(s, path);
  const AppearanceKnowledgeSet back = load_embeddings(path);
  fs::remove(path);
  const bool exact = back == s && std::memcmp(back.data.data(), m.data(), sizeof(float) * m.size()) == 0;

  const auto good = encode_container(m, &s.labels, 0);
  auto code = [](const std::vector<std::byte>& bytes) -> std::optional<FormatErrc> {
    std::size_t offset = 0;
    try {
      decode_container(bytes, offset);
    } catch (const FormatError& e) {
      return e.code();
    }
    return std::nullopt;
  };
  auto bad_magic = good;
  bad_magic[0] = std::byte{'X'};
  std::size_t truncated_ok = 0;
  for (std::size_t n = 0; n < good.size(); n += 7)
    truncated_ok += code(std::vector<std::byte>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n))) ==
                            FormatErrc::Truncated
                        ? 1
                        : 0;
  const std::size_t truncated_total = (good.size() + 6) / 7;
  o.detail << "round trip " << (exact ? "bit-exact" : "differs") << "; bad magic "
           << (code(bad_magic) == FormatErrc::BadMagic ? "BadMagic" : "wrong error") << "; truncations "
           << truncated_ok << "/" << truncated_total << " Truncated";
  o.expect(exact, "bit-exact round trip");
  o.expect(code(bad_magic) == FormatErrc::BadMagic, "corrupted magic gives BadMagic");
  o.expect(truncated_ok == truncated_total, "truncation gives Truncated");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"gradient-fidelity", gradient_fidelity},   {"assignment-oracle", assignment_oracle},
      {"reference-loss-identities", reference_identities}, {"kmeans", kmeans_properties},
      {"corpus", corpus_properties},               {"task-prompting", tuning_properties},
      {"element-balance", element_balance},       {"k-sweep", k_sweep},
      {"parameter-overhead", parameter_overhead}, {"file-format", file_format},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail.str() << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
