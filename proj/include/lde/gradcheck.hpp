#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lde/numerics.hpp"

namespace lde {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;

struct GradCheckCase {
  std::string path;
  std::uint64_t seed = 0;
  GradCheckReport report;

  bool passed() const { return report.max_rel_error <= kGradTolerance; }
};

/// Central-difference checks of every trainable path on small random models:
/// classifier head, prompts, integration module, reference loss (both
/// attention modes) and the total toy loss. One case per path and seed.
std::vector<GradCheckCase> gradcheck_suite(std::size_t seeds, std::uint64_t base_seed = 0);

std::string gradcheck_json(const std::vector<GradCheckCase>& cases);

}  // namespace lde
