#pragma once

#include <cstdint>
#include <vector>

#include "uidkat/param.hpp"

namespace uidkat {

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments for one group of parameters sharing a step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  static AdamState for_params(const ParamRefs<T>& params, AdamHyper hyper = {});
};

/// One bias-corrected Adam update of a single tensor at step `step` (1-based).
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v,
                 std::uint64_t step, const AdamHyper& hyper);

/// Advances the step counter and updates every parameter from its grad.
template <typename T>
void adam_step(const ParamRefs<T>& params, AdamState<T>& state);

}  // namespace uidkat
