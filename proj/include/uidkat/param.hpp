#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uidkat/rng.hpp"
#include "uidkat/tensor.hpp"

namespace uidkat {

/// A learnable tensor with its accumulated gradient.
template <typename T>
struct Param {
  Param() = default;
  Param(std::string n, Shape shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->grad.fill(T(0));
}

template <typename T>
std::size_t count_elements(const ParamRefs<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.numel();
  return n;
}

/// Zero-mean Gaussian with std = gain / sqrt(fan_in).
template <typename T>
void init_fan_in(Tensor<T>& t, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double std = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal() * std);
}

}  // namespace uidkat
