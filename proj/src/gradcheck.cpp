#include "lde/gradcheck.hpp"

#include "json.hpp"
#include "lde/integration.hpp"
#include "lde/prompting.hpp"
#include "lde/rng.hpp"

namespace lde {
namespace {

Matrix gaussian(Index rows, Index cols, RngStream& rng, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

std::vector<Matrix> module_params(const IntegrationModule& m) {
  std::vector<Matrix> out;
  for (Matrix* p : const_cast<IntegrationModule&>(m).parameters()) out.push_back(*p);
  return out;
}

// Inverse of IntegrationModule::parameters() ordering.
IntegrationVars vars_from(std::span<const Var> p, bool biases) {
  IntegrationVars v;
  v.w_q = p[0];
  v.w_k = p[1];
  v.w_v = p[2];
  v.w_o = p[3];
  v.gamma = p[4];
  v.beta = p[5];
  if (biases) {
    v.b_q = p[6];
    v.b_v = p[7];
    v.b_o = p[8];
  }
  return v;
}

IntegrationModule perturbed_module(const IntegrationConfig& c, RngStream& rng) {
  IntegrationModule m = IntegrationModule::init(c, rng);
  // Non-trivial biases and norm parameters so their gradients are exercised.
  for (Matrix* p : m.parameters()) *p += gaussian(p->rows(), p->cols(), rng, 0.3);
  return m;
}

std::vector<std::uint8_t> partition_of(Index k) {
  std::vector<std::uint8_t> part(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) part[static_cast<std::size_t>(i)] = (i % 2 == 0) ? 1 : 0;
  return part;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite(std::size_t seeds, std::uint64_t base_seed) {
  std::vector<GradCheckCase> out;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = derive_seed(base_seed, s);
    RngStream rng(seed);

    // Task-prompting: K centroids, d dims, batch of element indices.
    const Index k = 5, d = 6, h = 7;
    const Matrix centroids = gaussian(k, d, rng);
    ClassifierHead head = ClassifierHead::init(d, h, rng);
    head.b1 = gaussian(1, h, rng, 0.3);
    head.b2 = gaussian(1, 1, rng, 0.3);
    const Matrix prompts = gaussian(k, d, rng, 0.3);
    const std::vector<Index> batch = {0, 3, 1, 4, 4, 2, 0};
    Matrix targets(static_cast<Index>(batch.size()), 1);
    for (Index i = 0; i < targets.rows(); ++i) targets(i, 0) = rng.coin(0.5) ? 1.0 : 0.0;

    out.push_back({"classifier_head", seed,
                   finite_diff_check(
                       [&](Tape& t, std::span<const Var> p) {
                         const TuneVars v{t.constant(prompts), p[0], p[1], p[2], p[3]};
                         return tuning_loss(t, centroids, v, batch, targets);
                       },
                       {head.w1, head.b1, head.w2, head.b2}, kGradEps)});
    out.push_back({"prompts", seed,
                   finite_diff_check(
                       [&](Tape& t, std::span<const Var> p) {
                         const TuneVars v{p[0], t.constant(head.w1), t.constant(head.b1), t.constant(head.w2),
                                          t.constant(head.b2)};
                         return tuning_loss(t, centroids, v, batch, targets);
                       },
                       {prompts}, kGradEps)});

    // Integration: N queries of width d_v attending to K elements of width d.
    IntegrationConfig cfg;
    cfg.visual_dim = 6;
    cfg.element_dim = 5;
    cfg.model_dim = 4;
    cfg.heads = 2;
    cfg.lambda_ref = 2.5;
    const Index n = 4, ke = 6;
    const Matrix queries = gaussian(n, static_cast<Index>(cfg.visual_dim), rng);
    const Matrix elements = gaussian(ke, static_cast<Index>(cfg.element_dim), rng);
    const Matrix probe = gaussian(n, static_cast<Index>(cfg.visual_dim), rng);
    const auto partition = partition_of(ke);
    std::vector<std::uint8_t> is_ped(static_cast<std::size_t>(n));
    Matrix y(n, 1);
    for (Index i = 0; i < n; ++i) {
      is_ped[static_cast<std::size_t>(i)] = (i % 2 == 0) ? 1 : 0;
      y(i, 0) = is_ped[static_cast<std::size_t>(i)];
    }
    const IntegrationModule module = perturbed_module(cfg, rng);
    const auto mp = module_params(module);

    out.push_back({"integration", seed,
                   finite_diff_check(
                       [&](Tape& t, std::span<const Var> p) {
                         const IntegrationGraph g = integrate_graph(t, t.constant(queries), t.constant(elements),
                                                                    vars_from(p, true), cfg);
                         return t.sum(t.mul(g.fused, t.constant(probe)));
                       },
                       mp, kGradEps)});

    for (const bool strict : {false, true}) {
      IntegrationConfig c = cfg;
      c.strict_single_softmax = strict;
      out.push_back({strict ? "reference_loss_strict" : "reference_loss", seed,
                     finite_diff_check(
                         [&](Tape& t, std::span<const Var> p) {
                           const IntegrationGraph g = integrate_graph(t, t.constant(queries), t.constant(elements),
                                                                      vars_from(p, true), c);
                           return reference_loss(t, g.ref_attn, partition, is_ped);
                         },
                         mp, kGradEps)});
    }

    std::vector<Matrix> all = mp;
    all.push_back(gaussian(static_cast<Index>(cfg.visual_dim), 1, rng));
    all.push_back(gaussian(1, 1, rng, 0.3));
    out.push_back({"total_loss", seed,
                   finite_diff_check(
                       [&](Tape& t, std::span<const Var> p) {
                         const IntegrationGraph g = integrate_graph(t, t.constant(queries), t.constant(elements),
                                                                    vars_from(p, true), cfg);
                         const Var logits = t.add(t.matmul(g.fused, p[9]), p[10]);
                         const Var task = t.bce_with_logits(logits, y);
                         return total_loss(t, task, reference_loss(t, g.ref_attn, partition, is_ped),
                                           cfg.lambda_ref);
                       },
                       all, kGradEps)});
  }
  return out;
}

std::string gradcheck_json(const std::vector<GradCheckCase>& cases) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& c : cases) {
    j.push_back({{"path", c.path},
                 {"seed", c.seed},
                 {"max_rel_error", c.report.max_rel_error},
                 {"coordinates", c.report.coordinates},
                 {"passed", c.passed()}});
  }
  return j.dump(2) + "\n";
}

}  // namespace lde
