#include "lde/toy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lde/digest.hpp"

namespace lde {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr Index kEvalChunk = 512;

Matrix rows_of(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(idx[i]));
  return out;
}

std::vector<std::uint8_t> labels_of(std::span<const std::uint8_t> labels, std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

struct ToyVars {
  IntegrationVars integration;
  Var w_cls, b_cls;
};

struct StepLosses {
  Var task, ref, total, logits, attn;
  bool has_ref = false;
};

// Builds the per-batch graph on an existing tape.
StepLosses build(Tape& t, const ToyModel& model, const ElementSet* elements, const ToyTrainConfig& cfg,
                 const Matrix& queries, std::span<const std::uint8_t> labels, bool trainable, ToyVars& vars) {
  StepLosses s;
  Var features = t.constant(queries);
  if (model.integration) {
    vars.integration = bind(t, *model.integration, trainable);
    const IntegrationGraph g =
        integrate_graph(t, features, t.constant(elements->elements), vars.integration, cfg.integration);
    features = g.fused;
    s.attn = g.ref_attn;
    s.ref = reference_loss(t, g.ref_attn, elements->partition, labels);
    s.has_ref = true;
  }
  vars.w_cls = trainable ? t.leaf(model.w_cls) : t.constant(model.w_cls);
  vars.b_cls = trainable ? t.leaf(model.b_cls) : t.constant(model.b_cls);
  s.logits = t.add(t.matmul(features, vars.w_cls), vars.b_cls);
  Matrix y(static_cast<Index>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Index>(i), 0) = labels[i] ? 1.0 : 0.0;
  s.task = t.bce_with_logits(s.logits, y);
  s.total = s.has_ref ? total_loss(t, s.task, s.ref, cfg.integration.lambda_ref) : s.task;
  return s;
}

std::vector<Matrix*> model_parameters(ToyModel& m) {
  std::vector<Matrix*> out;
  if (m.integration) out = m.integration->parameters();
  out.push_back(&m.w_cls);
  out.push_back(&m.b_cls);
  return out;
}

std::vector<Var> var_list(const ToyModel& m, const ToyVars& v) {
  std::vector<Var> out;
  if (m.integration) {
    out = {v.integration.w_q, v.integration.w_k, v.integration.w_v, v.integration.w_o, v.integration.gamma,
           v.integration.beta};
    if (m.integration->b_q.size() > 0)
      out.insert(out.end(), {v.integration.b_q, v.integration.b_v, v.integration.b_o});
  }
  out.push_back(v.w_cls);
  out.push_back(v.b_cls);
  return out;
}

struct PassResult {
  double task = 0.0, ref = 0.0;
  std::vector<double> scores;
  double ped_mass = 0.0, bg_mass = 0.0, mass = 0.0;
};

// Forward-only pass over idx in fixed chunks.
PassResult evaluate(const ToyModel& model, const ElementSet* elements, const ToyTrainConfig& cfg,
                    const ToyDataset& data, std::span<const std::size_t> idx) {
  PassResult r;
  r.scores.reserve(idx.size());
  double ped_mass = 0.0, bg_mass = 0.0;
  std::size_t n_ped = 0, n_bg = 0;
  for (std::size_t at = 0; at < idx.size(); at += kEvalChunk) {
    const std::size_t end = std::min(idx.size(), at + static_cast<std::size_t>(kEvalChunk));
    const auto chunk = idx.subspan(at, end - at);
    const auto labels = labels_of(data.labels, chunk);
    Tape t;
    ToyVars vars;
    const StepLosses s = build(t, model, elements, cfg, rows_of(data.queries, chunk), labels, false, vars);
    const double w = static_cast<double>(chunk.size());
    r.task += w * t.scalar(s.task);
    if (s.has_ref) {
      r.ref += w * t.scalar(s.ref);
      const Matrix& a = t.value(s.attn);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        double correct = 0.0;
        for (Index e = 0; e < a.cols(); ++e)
          if ((elements->partition[static_cast<std::size_t>(e)] != 0) == (labels[i] != 0))
            correct += a(static_cast<Index>(i), e);
        (labels[i] ? ped_mass : bg_mass) += correct;
        ++(labels[i] ? n_ped : n_bg);
      }
    }
    const Matrix& z = t.value(s.logits);
    for (Index i = 0; i < z.rows(); ++i) r.scores.push_back(sigmoid(z(i, 0)));
  }
  const double n = static_cast<double>(idx.size());
  r.task /= n;
  r.ref /= n;
  if (model.integration) {
    r.ped_mass = n_ped ? ped_mass / static_cast<double>(n_ped) : kNaN;
    r.bg_mass = n_bg ? bg_mass / static_cast<double>(n_bg) : kNaN;
    r.mass = (ped_mass + bg_mass) / n;
  } else {
    r.ped_mass = r.bg_mass = r.mass = kNaN;
  }
  return r;
}

double accuracy(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hit += ((scores[i] >= 0.5) == (labels[i] != 0)) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

ordered_json num(double x) { return std::isfinite(x) ? ordered_json(x) : ordered_json(nullptr); }

}  // namespace

void ToyDataConfig::validate() const {
  require(n >= 2, "toy.n: must be >= 2");
  require(visual_dim >= 8, "toy.d_v: must be >= 8");
  require(sigma_v >= 0.0, "toy.sigma_v: must be >= 0");
  require(embed_dim >= 8, "toy.embed_dim: must be >= 8");
}

ToyDataset ToyDataset::slice(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= size(), "ToyDataset::slice: range out of bounds");
  ToyDataset out;
  out.queries = queries.middleRows(static_cast<Index>(begin), static_cast<Index>(end - begin));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  out.config = config;
  out.projection_digest = projection_digest;
  return out;
}

Matrix visual_projection(std::size_t embed_dim, std::size_t visual_dim, std::uint64_t seed) {
  RngStream rng(derive_seed(seed, 0x76697375ULL));
  Matrix w(static_cast<Index>(embed_dim), static_cast<Index>(visual_dim));
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  return w;
}

Matrix make_query(const Description& description, const Matrix& projection, double sigma, std::uint64_t embed_seed,
                  const AttributeLexicon& lex, RngStream& rng) {
  const Eigen::VectorXd v = encode_pseudo(description, static_cast<std::size_t>(projection.rows()), embed_seed, lex);
  Matrix q = v.transpose() * projection;
  for (Index j = 0; j < q.cols(); ++j) q(0, j) += sigma * rng.normal();
  return q;
}

ToyDataset synth_dataset(const ToyDataConfig& config, const AttributeLexicon& lex) {
  config.validate();
  ToyDataset d;
  d.config = config;
  const Matrix w = visual_projection(config.embed_dim, config.visual_dim, config.seed);
  d.projection_digest = matrix_digest(w);
  d.queries.resize(static_cast<Index>(config.n), static_cast<Index>(config.visual_dim));
  d.labels.resize(config.n);
  for (std::size_t i = 0; i < config.n; ++i) {
    RngStream rng(derive_seed(config.seed, 0x71ULL, i));
    const bool ped = rng.coin(0.5);
    const Description desc = ped ? render_pedestrian(rng, lex) : render_background(rng, lex);
    d.queries.row(static_cast<Index>(i)) = make_query(desc, w, config.sigma_v, config.embed_seed, lex, rng);
    d.labels[i] = ped ? 1 : 0;
  }
  return d;
}

void ToyTrainConfig::validate() const {
  integration.validate();
  require(batch >= 1, "toy.batch: must be >= 1");
  require(lr > 0.0, "toy.lr: must be > 0");
  require(n_train >= 1, "toy.n_train: must be >= 1");
}

std::size_t ToyModel::parameter_count() const {
  return (integration ? integration->parameter_count() : 0) + baseline_parameter_count();
}

std::size_t ToyModel::baseline_parameter_count() const {
  return static_cast<std::size_t>(w_cls.size() + b_cls.size());
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require(scores.size() == labels.size(), "average_precision: score and label counts differ");
  std::size_t positives = 0;
  for (auto l : labels) positives += l ? 1 : 0;
  require(positives > 0, "average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      tp += labels[order[i]] ? 1 : 0;
      ++seen;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

ToyRun train_toy(const ToyDataset& dataset, const ElementSet* elements, const ToyTrainConfig& config) {
  if (dataset.size() == 0) throw PreconditionError("train_toy: empty dataset");
  ToyTrainConfig cfg = config;
  if (elements) cfg.integration.element_dim = static_cast<std::size_t>(elements->elements.cols());
  cfg.integration.visual_dim = static_cast<std::size_t>(dataset.queries.cols());
  cfg.validate();
  if (elements && elements->partition.size() != static_cast<std::size_t>(elements->elements.rows()))
    throw ShapeError("train_toy: element and partition counts differ");
  if (elements && elements->elements.rows() < 1) throw ShapeError("train_toy: no elements");

  const std::size_t n_train = std::min(cfg.n_train, dataset.size());
  std::vector<std::size_t> train(n_train), eval;
  std::iota(train.begin(), train.end(), 0);
  for (std::size_t i = n_train; i < dataset.size(); ++i) eval.push_back(i);
  if (eval.empty()) eval = train;
  const auto eval_labels = labels_of(dataset.labels, eval);

  RngStream rng(derive_seed(cfg.seed, 0x746f79ULL));
  ToyRun run;
  run.config = cfg;
  run.k = elements ? static_cast<std::size_t>(elements->elements.rows()) : 0;
  ToyModel& model = run.model;
  if (elements) model.integration = IntegrationModule::init(cfg.integration, rng);
  const Index dv = dataset.queries.cols();
  model.w_cls.resize(dv, 1);
  for (Index i = 0; i < dv; ++i) model.w_cls(i, 0) = rng.normal() / std::sqrt(static_cast<double>(dv));
  model.b_cls = Matrix::Zero(1, 1);

  auto record = [&](std::size_t epoch, double task, double ref) {
    const PassResult e = evaluate(model, elements, cfg, dataset, eval);
    EpochMetrics m;
    m.epoch = epoch;
    m.task_loss = task;
    m.ref_loss = ref;
    m.accuracy = accuracy(e.scores, eval_labels);
    m.average_precision = average_precision(e.scores, eval_labels);
    m.pedestrian_mass = e.ped_mass;
    m.background_mass = e.bg_mass;
    m.correct_mass = e.mass;
    run.epochs.push_back(m);
  };

  {
    const PassResult init = evaluate(model, elements, cfg, dataset, train);
    record(0, init.task, init.ref);
  }

  Adam adam(cfg.lr);
  std::vector<std::size_t> order = train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double task_sum = 0.0, ref_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch) {
      const std::size_t end = std::min(order.size(), at + cfg.batch);
      const auto batch = std::span<const std::size_t>(order).subspan(at, end - at);
      Tape t;
      ToyVars vars;
      const StepLosses s =
          build(t, model, elements, cfg, rows_of(dataset.queries, batch), labels_of(dataset.labels, batch), true, vars);
      t.backward(s.total);
      const double w = static_cast<double>(batch.size());
      task_sum += w * t.scalar(s.task);
      if (s.has_ref) ref_sum += w * t.scalar(s.ref);
      std::vector<Matrix> grads;
      for (Var v : var_list(model, vars)) grads.push_back(t.grad(v));
      const auto params = model_parameters(model);
      adam.step(params, grads);
    }
    const double n = static_cast<double>(order.size());
    record(epoch, task_sum / n, ref_sum / n);
  }
  for (const auto& m : run.epochs) {
    if (!std::isfinite(m.task_loss) || !std::isfinite(m.ref_loss) || !std::isfinite(m.accuracy))
      throw NonFiniteError("train_toy: non-finite metric at epoch " + std::to_string(m.epoch));
  }
  return run;
}

std::string toy_run_json(const ToyRun& run) {
  const auto& c = run.config;
  ordered_json j;
  j["config"] = {{"epochs", c.epochs},
                 {"batch", c.batch},
                 {"lr", c.lr},
                 {"seed", c.seed},
                 {"n_train", c.n_train},
                 {"d_v", c.integration.visual_dim},
                 {"d", c.integration.element_dim},
                 {"d_m", c.integration.model_dim},
                 {"heads", c.integration.heads},
                 {"lambda_ref", c.integration.lambda_ref},
                 {"strict_single_softmax", c.integration.strict_single_softmax}};
  j["k"] = run.k;
  j["params"] = run.model.parameter_count();
  ordered_json epochs = ordered_json::array();
  for (const auto& m : run.epochs) {
    epochs.push_back({{"epoch", m.epoch},
                      {"task_loss", num(m.task_loss)},
                      {"ref_loss", num(m.ref_loss)},
                      {"accuracy", num(m.accuracy)},
                      {"average_precision", num(m.average_precision)},
                      {"pedestrian_mass", num(m.pedestrian_mass)},
                      {"background_mass", num(m.background_mass)},
                      {"correct_mass", num(m.correct_mass)}});
  }
  j["epochs"] = epochs;
  return j.dump(2) + "\n";
}

SweepTable ablation_k_sweep(const AppearanceKnowledgeSet& knowledge, const ToyDataset& dataset,
                            const SweepConfig& config) {
  require(!config.ks.empty(), "sweep.ks: must not be empty");
  require(!config.seeds.empty(), "sweep.seeds: must not be empty");
  knowledge.validate();
  const Matrix data = knowledge.as_double();

  struct Job {
    std::size_t k;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t k : config.ks)
    for (std::uint64_t s : config.seeds) jobs.push_back({k, s});

  SweepTable table;
  table.rows.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());

  auto run_job = [&](std::size_t j) {
    const Job job = jobs[j];
    SweepRow& row = table.rows[j];
    row.k = job.k;
    row.seed = job.seed;
    ToyTrainConfig toy = config.toy;
    toy.seed = job.seed;
    if (job.k == 0) {
      const ToyRun r = train_toy(dataset, nullptr, toy);
      row.accuracy = r.final().accuracy;
      row.average_precision = r.final().average_precision;
      row.ref_mass = row.initial_ref_mass = row.pedestrian_fraction = kNaN;
      return;
    }
    KMeansOptions km = config.kmeans;
    km.k = job.k;
    km.seed = derive_seed(config.kmeans.seed, job.seed, job.k);
    km.threads = 1;
    const CentroidSet centroids = kmeans(data, km);
    row.assignments = assign_all(data, centroids.centroids);
    const ElementPartition partition = label_elements(row.assignments, knowledge.labels, job.k);
    row.partition = partition.labels;
    row.pedestrian_fraction = partition.pedestrian_fraction();
    TuneOptions tune = config.tune;
    tune.seed = derive_seed(config.tune.seed, job.seed, job.k);
    const TuneResult tuned = prompt_tune(knowledge.labels, centroids.centroids, row.assignments, tune);
    const ElementSet elements = compose_elements(centroids.centroids, tuned.prompts.prompts, partition.labels);
    const ToyRun r = train_toy(dataset, &elements, toy);
    row.accuracy = r.final().accuracy;
    row.average_precision = r.final().average_precision;
    row.ref_mass = r.final().correct_mass;
    row.initial_ref_mass = r.epochs.front().correct_mass;
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(config.jobs, jobs.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        run_job(j);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (std::size_t k : config.ks) {
    std::vector<double> acc, ap, mass;
    for (const auto& r : table.rows) {
      if (r.k != k) continue;
      acc.push_back(r.accuracy);
      ap.push_back(r.average_precision);
      mass.push_back(r.ref_mass);
    }
    table.summary.push_back({k, mean_of(acc), sd_of(acc), mean_of(ap), sd_of(ap), mean_of(mass), sd_of(mass)});
  }
  return table;
}

std::string sweep_csv(const SweepTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "k,seed,acc,ap,ref_mass\n";
  for (const auto& r : table.rows) {
    out << r.k << ',' << r.seed << ',' << r.accuracy << ',' << r.average_precision << ',';
    if (std::isfinite(r.ref_mass)) out << r.ref_mass;
    out << '\n';
  }
  return out.str();
}

std::string sweep_summary_json(const SweepTable& table) {
  ordered_json j = ordered_json::array();
  for (const auto& s : table.summary) {
    j.push_back({{"k", s.k},
                 {"acc_mean", num(s.acc_mean)},
                 {"acc_sd", num(s.acc_sd)},
                 {"ap_mean", num(s.ap_mean)},
                 {"ap_sd", num(s.ap_sd)},
                 {"ref_mass_mean", num(s.mass_mean)},
                 {"ref_mass_sd", num(s.mass_sd)}});
  }
  return j.dump(2) + "\n";
}

std::string sweep_svg(const SweepTable& table) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 20, B = 50;
  double lo = 1.0, hi = 0.0;
  for (const auto& s : table.summary) {
    lo = std::min(lo, s.acc_mean - s.acc_sd);
    hi = std::max(hi, s.acc_mean + s.acc_sd);
  }
  if (!(hi > lo)) {
    lo -= 0.01;
    hi += 0.01;
  }
  const double pad = 0.1 * (hi - lo);
  lo -= pad;
  hi += pad;
  const std::size_t n = table.summary.size();
  auto x_at = [&](std::size_t i) { return L + (W - L - R) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5); };
  auto y_at = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };
  std::ostringstream out;
  out.precision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">K</text>\n";
  out << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2
      << ")\" text-anchor=\"middle\">accuracy</text>\n";
  for (double v : {lo + pad, hi - pad})
    out << "<text x=\"" << L - 5 << "\" y=\"" << y_at(v) << "\" text-anchor=\"end\" font-size=\"10\">" << v
        << "</text>\n";
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < n; ++i) out << x_at(i) << ',' << y_at(table.summary[i].acc_mean) << ' ';
  out << "\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = table.summary[i];
    out << "<line x1=\"" << x_at(i) << "\" y1=\"" << y_at(s.acc_mean - s.acc_sd) << "\" x2=\"" << x_at(i)
        << "\" y2=\"" << y_at(s.acc_mean + s.acc_sd) << "\" stroke=\"steelblue\"/>\n";
    out << "<circle cx=\"" << x_at(i) << "\" cy=\"" << y_at(s.acc_mean) << "\" r=\"3\" fill=\"steelblue\"/>\n";
    out << "<text x=\"" << x_at(i) << "\" y=\"" << H - B + 15 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << s.k << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

OverheadReport overhead_report(const ToyModel& with, const ToyModel& without) {
  OverheadReport r;
  r.module_params = with.integration ? with.integration->parameter_count() : 0;
  r.baseline_params = without.parameter_count();
  r.total_params = with.parameter_count();
  require(r.total_params >= r.baseline_params, "overhead_report: model with elements is smaller than the baseline");
  r.added_params = r.total_params - r.baseline_params;
  r.ratio = r.baseline_params ? static_cast<double>(r.added_params) / static_cast<double>(r.baseline_params) : 0.0;
  return r;
}

std::string overhead_json(const OverheadReport& r) {
  ordered_json j;
  j["module_params"] = r.module_params;
  j["baseline_params"] = r.baseline_params;
  j["total_params"] = r.total_params;
  j["added_params"] = r.added_params;
  j["ratio"] = r.ratio;
  return j.dump(2) + "\n";
}

}  // namespace lde
