#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lde/common.hpp"
#include "lde/embedding.hpp"
#include "lde/numerics.hpp"
#include "lde/rng.hpp"

namespace lde {

struct IntegrationConfig {
  std::size_t visual_dim = 64;    // d_v
  std::size_t element_dim = 128;  // d
  std::size_t model_dim = 64;     // d_m
  std::size_t heads = 8;
  double lambda_ref = 1.0;
  /// Reference loss reads one full-width softmax instead of the head mean.
  bool strict_single_softmax = false;
  /// Biases on the query, value and output projections.
  bool biases = true;

  /// Throws PreconditionError naming the offending field.
  void validate() const;
  std::size_t head_dim() const { return model_dim / heads; }
};

/// Cross-attention from visual queries onto appearance elements, followed by
/// residual addition and layer normalization.
struct IntegrationModule {
  Matrix w_q;  // d_v x d_m
  Matrix b_q;  // 1 x d_m
  Matrix w_k;  // d x d_m
  Matrix w_v;  // d x d_m
  Matrix b_v;  // 1 x d_m
  Matrix w_o;  // d_m x d_v
  Matrix b_o;  // 1 x d_v
  Matrix ln_gamma;  // 1 x d_v
  Matrix ln_beta;   // 1 x d_v

  static IntegrationModule init(const IntegrationConfig& config, RngStream& rng);
  std::size_t parameter_count() const;
  std::vector<Matrix*> parameters();
  std::vector<NamedMatrix> named() const;
  static IntegrationModule from_named(std::span<const NamedMatrix> sections);
};

/// d_v*d_m + 2*d*d_m + d_m*d_v + 2*d_v, plus d_m + d_m + d_v when biases are on.
std::size_t analytic_parameter_count(const IntegrationConfig& config);

struct IntegrationVars {
  Var w_q, b_q, w_k, w_v, b_v, w_o, b_o, gamma, beta;
};

/// Places the module on a tape, as leaves when trainable, otherwise as constants.
IntegrationVars bind(Tape& tape, const IntegrationModule& module, bool trainable);

struct IntegrationGraph {
  Var fused;     // N x d_v
  Var attn;      // N x K, mean over heads
  Var ref_attn;  // distribution the reference loss reads (attn, or the strict single softmax)
};

IntegrationGraph integrate_graph(Tape& tape, Var queries, Var elements, const IntegrationVars& vars,
                                 const IntegrationConfig& config);

struct IntegrationOutput {
  Matrix fused;
  Matrix attn;
  Matrix ref_attn;
};

/// Forward pass on frozen weights. Safe to call concurrently.
IntegrationOutput integrate_forward(const Matrix& queries, const Matrix& elements, const IntegrationModule& module,
                                    const IntegrationConfig& config);

class DegeneratePartitionError : public Error {
 public:
  using Error::Error;
};

/// Attention mass on the partition a query should not read, averaged over that
/// partition's size: E_b for pedestrian queries, E_p for background ones.
double reference_loss(std::span<const double> attn_row, std::span<const std::uint8_t> partition, bool is_pedestrian);
/// Mean over rows.
double reference_loss(const Matrix& attn, std::span<const std::uint8_t> partition,
                      std::span<const std::uint8_t> is_pedestrian);
Var reference_loss(Tape& tape, Var attn, std::span<const std::uint8_t> partition,
                   std::span<const std::uint8_t> is_pedestrian);

double total_loss(double task_loss, double ref_loss, double lambda_ref);
Var total_loss(Tape& tape, Var task_loss, Var ref_loss, double lambda_ref);

}  // namespace lde
