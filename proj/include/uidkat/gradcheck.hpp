#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uidkat/param.hpp"

namespace uidkat {

struct GradCheckOptions {
  double h = 1e-5;
  /// Five-point stencil (8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h: O(h^4)
  /// truncation, so a larger h keeps roundoff below tiny gradient entries.
  bool fourth_order = false;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Entries sampled per tensor; 0 checks every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  bool passed = true;
  double tolerance = 0.0;
  /// Names the offending tensor and index when the check fails.
  std::string failure;

  double max_rel_error() const;
};

/// A tensor to perturb and the analytic gradient of the loss with respect to it.
template <typename T>
struct GradTarget {
  std::string name;
  Tensor<T>* value;
  const Tensor<T>* analytic;
};

/// Central differences of `loss` against precomputed analytic gradients.
/// `loss` must recompute the forward pass from the current tensor values.
template <typename T>
GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  const std::vector<GradTarget<T>>& targets,
                                  const GradCheckOptions& opts);

/// Convenience for a single op: loss = sum(upstream * forward(inputs)).
/// `backward` returns one gradient per input given the upstream gradient.
template <typename T>
GradCheckReport check_op(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& forward,
    const std::function<std::vector<Tensor<T>>(const std::vector<Tensor<T>>&, const Tensor<T>&)>&
        backward,
    std::vector<Tensor<T>> inputs, const std::vector<std::string>& names,
    const GradCheckOptions& opts);

/// Gradient targets for every parameter of a module (values and accumulated grads).
template <typename T>
std::vector<GradTarget<T>> param_targets(const ParamRefs<T>& params) {
  std::vector<GradTarget<T>> out;
  for (auto* p : params) out.push_back({p->name, &p->value, &p->grad});
  return out;
}

}  // namespace uidkat
