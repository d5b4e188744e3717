#include "uidkat/adam.hpp"

#include <cmath>

namespace uidkat {

template <typename T>
AdamState<T> AdamState<T>::for_params(const ParamRefs<T>& params, AdamHyper hyper) {
  AdamState s;
  s.hyper = hyper;
  for (const auto* p : params) {
    s.m.push_back(Tensor<T>::zeros_like(p->value));
    s.v.push_back(Tensor<T>::zeros_like(p->value));
  }
  return s;
}

template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v,
                 std::uint64_t step, const AdamHyper& hyper) {
  expect_shape(grad.shape(), param.shape(), "adam gradient");
  expect_shape(m.shape(), param.shape(), "adam first moment");
  expect_shape(v.shape(), param.shape(), "adam second moment");
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const std::size_t n = param.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= static_cast<T>(hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
  }
}

template <typename T>
void adam_step(const ParamRefs<T>& params, AdamState<T>& state) {
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                     " tensors but " + std::to_string(params.size()) + " were given");
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i]->value, params[i]->grad, state.m[i], state.v[i], state.step,
                state.hyper);
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_update(Tensor<float>&, const Tensor<float>&, Tensor<float>&, Tensor<float>&,
                          std::uint64_t, const AdamHyper&);
template void adam_update(Tensor<double>&, const Tensor<double>&, Tensor<double>&,
                          Tensor<double>&, std::uint64_t, const AdamHyper&);
template void adam_step(const ParamRefs<float>&, AdamState<float>&);
template void adam_step(const ParamRefs<double>&, AdamState<double>&);

}  // namespace uidkat
