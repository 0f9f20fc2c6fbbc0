#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace lde {

/// SplitMix64 stream. The state advances by a fixed odd constant and every
/// output is a pure function of (seed, draw index), so sequences are identical
/// on every platform and compiler.
class RngStream {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64";

  explicit RngStream(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();
  /// Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  bool coin(double p = 0.5) { return uniform() < p; }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value);
/// FNV-1a over the bytes, keyed by seed and finalized with mix64.
std::uint64_t hash_string(std::uint64_t seed, std::string_view text);

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t master, Rest... rest) {
  std::uint64_t h = mix64(master ^ 0x9e3779b97f4a7c15ULL);
  ((h = hash_combine(h, static_cast<std::uint64_t>(rest))), ...);
  return h;
}

}  // namespace lde
