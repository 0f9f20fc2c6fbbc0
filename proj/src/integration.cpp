#include "lde/integration.hpp"

#include <cmath>
#include <map>

namespace lde {
namespace {

Matrix gaussian(Index rows, Index cols, double sd, RngStream& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

// Row weights that turn sum(attn .* W) / N into the batch reference loss.
Matrix reference_weights(Index rows, std::span<const std::uint8_t> partition,
                         std::span<const std::uint8_t> is_pedestrian) {
  require(static_cast<Index>(is_pedestrian.size()) == rows, "reference_loss: indicator count differs from rows");
  std::size_t n_ped = 0;
  for (auto l : partition) n_ped += l ? 1 : 0;
  const std::size_t n_bg = partition.size() - n_ped;
  Matrix w = Matrix::Zero(rows, static_cast<Index>(partition.size()));
  for (Index r = 0; r < rows; ++r) {
    const bool ped = is_pedestrian[static_cast<std::size_t>(r)] != 0;
    const std::size_t penalized = ped ? n_bg : n_ped;
    if (penalized == 0)
      throw DegeneratePartitionError(ped ? "reference_loss: no background elements for a pedestrian query"
                                         : "reference_loss: no pedestrian elements for a background query");
    for (std::size_t i = 0; i < partition.size(); ++i)
      if ((partition[i] != 0) != ped) w(r, static_cast<Index>(i)) = 1.0 / static_cast<double>(penalized);
  }
  return w;
}

}  // namespace

void IntegrationConfig::validate() const {
  require(visual_dim >= 1, "integration.d_v: must be >= 1");
  require(element_dim >= 1, "integration.d: must be >= 1");
  require(model_dim >= 1, "integration.d_m: must be >= 1");
  require(heads >= 1, "integration.heads: must be >= 1");
  require(model_dim % heads == 0, "integration.heads: must divide d_m");
  require(lambda_ref >= 0.0, "integration.lambda_ref: must be >= 0");
}

IntegrationModule IntegrationModule::init(const IntegrationConfig& c, RngStream& rng) {
  c.validate();
  const auto dv = static_cast<Index>(c.visual_dim), d = static_cast<Index>(c.element_dim),
             dm = static_cast<Index>(c.model_dim);
  IntegrationModule m;
  m.w_q = gaussian(dv, dm, 1.0 / std::sqrt(static_cast<double>(dv)), rng);
  m.w_k = gaussian(d, dm, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  m.w_v = gaussian(d, dm, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  m.w_o = gaussian(dm, dv, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
  if (c.biases) {
    m.b_q = Matrix::Zero(1, dm);
    m.b_v = Matrix::Zero(1, dm);
    m.b_o = Matrix::Zero(1, dv);
  }
  m.ln_gamma = Matrix::Ones(1, dv);
  m.ln_beta = Matrix::Zero(1, dv);
  return m;
}

std::vector<Matrix*> IntegrationModule::parameters() {
  std::vector<Matrix*> out = {&w_q, &w_k, &w_v, &w_o, &ln_gamma, &ln_beta};
  for (Matrix* b : {&b_q, &b_v, &b_o})
    if (b->size() > 0) out.push_back(b);
  return out;
}

std::size_t IntegrationModule::parameter_count() const {
  std::size_t n = 0;
  for (Matrix* p : const_cast<IntegrationModule*>(this)->parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

std::vector<NamedMatrix> IntegrationModule::named() const {
  std::vector<NamedMatrix> out = {{"w_q", w_q}, {"w_k", w_k}, {"w_v", w_v}, {"w_o", w_o},
                                  {"ln_gamma", ln_gamma}, {"ln_beta", ln_beta}};
  if (b_q.size() > 0) out.insert(out.end(), {{"b_q", b_q}, {"b_v", b_v}, {"b_o", b_o}});
  return out;
}

IntegrationModule IntegrationModule::from_named(std::span<const NamedMatrix> sections) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& s : sections) by_name[s.name] = &s.value;
  auto get = [&](const char* name, bool optional = false) -> Matrix {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (optional) return {};
      throw PreconditionError(std::string("integration weights: missing section ") + name);
    }
    return *it->second;
  };
  IntegrationModule m;
  m.w_q = get("w_q");
  m.w_k = get("w_k");
  m.w_v = get("w_v");
  m.w_o = get("w_o");
  m.ln_gamma = get("ln_gamma");
  m.ln_beta = get("ln_beta");
  m.b_q = get("b_q", true);
  m.b_v = get("b_v", true);
  m.b_o = get("b_o", true);
  return m;
}

std::size_t analytic_parameter_count(const IntegrationConfig& c) {
  const std::size_t dv = c.visual_dim, d = c.element_dim, dm = c.model_dim;
  std::size_t n = dv * dm + 2 * d * dm + dm * dv + 2 * dv;
  if (c.biases) n += dm + dm + dv;
  return n;
}

IntegrationVars bind(Tape& tape, const IntegrationModule& m, bool trainable) {
  auto put = [&](const Matrix& x) { return trainable ? tape.leaf(x) : tape.constant(x); };
  IntegrationVars v;
  v.w_q = put(m.w_q);
  v.w_k = put(m.w_k);
  v.w_v = put(m.w_v);
  v.w_o = put(m.w_o);
  v.gamma = put(m.ln_gamma);
  v.beta = put(m.ln_beta);
  const bool biases = m.b_q.size() > 0;
  if (biases) {
    v.b_q = put(m.b_q);
    v.b_v = put(m.b_v);
    v.b_o = put(m.b_o);
  }
  return v;
}

IntegrationGraph integrate_graph(Tape& t, Var queries, Var elements, const IntegrationVars& v,
                                 const IntegrationConfig& c) {
  c.validate();
  if (static_cast<std::size_t>(t.value(queries).cols()) != c.visual_dim)
    throw ShapeError("integrate: query width differs from d_v");
  if (static_cast<std::size_t>(t.value(elements).cols()) != c.element_dim)
    throw ShapeError("integrate: element width differs from d");
  if (t.value(elements).rows() < 1) throw ShapeError("integrate: no elements");

  Var q = t.matmul(queries, v.w_q);
  if (c.biases) q = t.add(q, v.b_q);
  const Var keys = t.matmul(elements, v.w_k);
  Var values = t.matmul(elements, v.w_v);
  if (c.biases) values = t.add(values, v.b_v);

  const auto dh = static_cast<Index>(c.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outputs;
  Var attn_sum{};
  for (std::size_t h = 0; h < c.heads; ++h) {
    const Index at = static_cast<Index>(h) * dh;
    const Var scores = t.scale(t.matmul_nt(t.slice_cols(q, at, dh), t.slice_cols(keys, at, dh)), scale);
    const Var a = t.softmax_rows(scores);
    outputs.push_back(t.matmul(a, t.slice_cols(values, at, dh)));
    attn_sum = h == 0 ? a : t.add(attn_sum, a);
  }
  IntegrationGraph g;
  g.attn = t.scale(attn_sum, 1.0 / static_cast<double>(c.heads));
  Var out = t.matmul(t.concat_cols(outputs), v.w_o);
  if (c.biases) out = t.add(out, v.b_o);
  g.fused = t.layer_norm_rows(t.add(queries, out), v.gamma, v.beta, 1e-5);
  if (c.strict_single_softmax) {
    const double full = 1.0 / std::sqrt(static_cast<double>(c.model_dim));
    g.ref_attn = t.softmax_rows(t.scale(t.matmul_nt(t.slice_cols(q, 0, static_cast<Index>(c.model_dim)),
                                                    t.slice_cols(keys, 0, static_cast<Index>(c.model_dim))),
                                        full));
  } else {
    g.ref_attn = g.attn;
  }
  return g;
}

IntegrationOutput integrate_forward(const Matrix& queries, const Matrix& elements, const IntegrationModule& module,
                                    const IntegrationConfig& config) {
  Tape tape;
  const IntegrationVars v = bind(tape, module, false);
  const Var q = tape.constant(queries);
  const Var e = tape.constant(elements);
  const IntegrationGraph g = integrate_graph(tape, q, e, v, config);
  return {tape.value(g.fused), tape.value(g.attn), tape.value(g.ref_attn)};
}

namespace {

// Extended-precision accumulation: for K <= 2048 every partial sum of a
// uniform row is exact, so uniform attention yields exactly 1/K.
long double row_reference_loss(const double* row, std::span<const std::uint8_t> partition, bool is_pedestrian) {
  long double mass = 0.0L;
  std::size_t n = 0;
  for (std::size_t i = 0; i < partition.size(); ++i) {
    if ((partition[i] != 0) != is_pedestrian) {
      mass += row[i];
      ++n;
    }
  }
  if (n == 0)
    throw DegeneratePartitionError(is_pedestrian ? "reference_loss: no background elements for a pedestrian query"
                                                 : "reference_loss: no pedestrian elements for a background query");
  return mass / static_cast<long double>(n);
}

void require_unit_sum(const double* row, std::size_t k) {
  long double sum = 0.0L;
  for (std::size_t i = 0; i < k; ++i) sum += row[i];
  require(std::abs(static_cast<double>(sum) - 1.0) <= 1e-9, "reference_loss: attention row does not sum to 1");
}

}  // namespace

double reference_loss(std::span<const double> attn_row, std::span<const std::uint8_t> partition, bool is_pedestrian) {
  require(attn_row.size() == partition.size(), "reference_loss: attention row and partition differ in length");
  require_unit_sum(attn_row.data(), attn_row.size());
  return static_cast<double>(row_reference_loss(attn_row.data(), partition, is_pedestrian));
}

double reference_loss(const Matrix& attn, std::span<const std::uint8_t> partition,
                      std::span<const std::uint8_t> is_pedestrian) {
  require(attn.cols() == static_cast<Index>(partition.size()), "reference_loss: attention width differs from K");
  require(attn.rows() >= 1, "reference_loss: no queries");
  require(static_cast<Index>(is_pedestrian.size()) == attn.rows(), "reference_loss: indicator count differs from rows");
  long double total = 0.0L;
  for (Index r = 0; r < attn.rows(); ++r) {
    const double* row = attn.data() + r * attn.cols();
    require_unit_sum(row, partition.size());
    total += row_reference_loss(row, partition, is_pedestrian[static_cast<std::size_t>(r)] != 0);
  }
  return static_cast<double>(total / static_cast<long double>(attn.rows()));
}

Var reference_loss(Tape& tape, Var attn, std::span<const std::uint8_t> partition,
                   std::span<const std::uint8_t> is_pedestrian) {
  const Index rows = tape.value(attn).rows();
  require(tape.value(attn).cols() == static_cast<Index>(partition.size()),
          "reference_loss: attention width differs from K");
  require(rows >= 1, "reference_loss: no queries");
  const Var w = tape.constant(reference_weights(rows, partition, is_pedestrian));
  return tape.scale(tape.sum(tape.mul(attn, w)), 1.0 / static_cast<double>(rows));
}

double total_loss(double task_loss, double ref_loss, double lambda_ref) {
  require(lambda_ref >= 0.0, "total_loss: lambda_ref must be >= 0");
  return task_loss + lambda_ref * ref_loss;
}

Var total_loss(Tape& tape, Var task_loss, Var ref_loss, double lambda_ref) {
  require(lambda_ref >= 0.0, "total_loss: lambda_ref must be >= 0");
  return tape.add(task_loss, tape.scale(ref_loss, lambda_ref));
}

}  // namespace lde
