#pragma once

// Finite-difference suite over every differentiable kernel, block and loss,
// in double precision on randomized shapes of at most 8x8 spatial extent.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uidkat/gradcheck.hpp"

namespace uidkat {

inline constexpr double kSingleOpTolerance = 1e-4;
inline constexpr double kComposedTolerance = 1e-3;

struct GradSuiteCase {
  std::string name;
  bool composed = false;
  GradCheckReport report;
};

/// Runs every case; `on_case` is called as each finishes.
std::vector<GradSuiteCase> run_gradient_suite(
    std::uint64_t seed, const std::function<void(const GradSuiteCase&)>& on_case = {});

}  // namespace uidkat
