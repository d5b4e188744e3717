#pragma once

// Numerical kernels with analytic backward passes. Every forward checks its
// output for NaN/Inf. Images are (B, C, H, W), token matrices are (N, C).

#include <string_view>
#include <type_traits>

#include "uidkat/tensor.hpp"

namespace uidkat {

/// Optional tensor argument that does not take part in template deduction.
template <typename T>
using OptTensor = std::type_identity_t<const Tensor<T>*>;
/// Optional gradient output, likewise non-deduced.
template <typename T>
using OptGrad = std::type_identity_t<Tensor<T>*>;

enum class PadMode { kZero, kReflect };

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::kZero;
};

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,k,k); bias may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, OptTensor<T> bias,
                 const Conv2dSpec& spec);

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               const Conv2dSpec& spec);

/// Accumulating variant used by the network modules. Any output pointer may be null.
template <typename T>
void conv2d_backward_into(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          const Conv2dSpec& spec, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db);

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

/// Depth-to-space: (B, C*r*r, H, W) -> (B, C, rH, rW).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);
/// Space-to-depth, the exact inverse of pixel_shuffle; also its backward.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);

// ---------------------------------------------------------------- norms

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct NormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

/// Per-(sample, channel) normalisation over H*W. gamma/beta (length C) are optional.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, OptTensor<T> gamma, OptTensor<T> beta,
                        NormCache<T>* cache = nullptr, double eps = kNormEps);

template <typename T>
void instance_norm_backward(const Tensor<T>& x, const NormCache<T>& cache,
                            OptTensor<T> gamma, const Tensor<T>& dy, Tensor<T>& dx,
                            OptGrad<T> dgamma, OptGrad<T> dbeta);

/// Per-row normalisation of a (N, C) token matrix.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, OptTensor<T> gamma, OptTensor<T> beta,
                     NormCache<T>* cache = nullptr, double eps = kNormEps);

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const NormCache<T>& cache, OptTensor<T> gamma,
                         const Tensor<T>& dy, Tensor<T>& dx, OptGrad<T> dgamma,
                         OptGrad<T> dbeta);

// ---------------------------------------------------------------- activations

enum class Activation { kIdentity, kRelu, kLeakyRelu, kLeakyRelu02, kGelu, kSilu, kSigmoid, kTanh };

/// "relu", "lrelu" (slope 0.1), "lrelu0.2", "gelu", "silu", "sigmoid", "tanh", "identity".
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

double activation_scalar(Activation a, double x);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

/// dx = dy * f'(x); y = f(x) is passed to avoid recomputing sigmoid/tanh.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& dy,
                              Activation kind);

// ---------------------------------------------------------------- resampling

/// r x r average pooling with stride r; H and W must be divisible by r.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t r);
template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, std::size_t r);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t r);
template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, std::size_t r);

// ---------------------------------------------------------------- dense

/// y = x * W^T + b for x (N, Din), W (Dout, Din); bias may be null.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, OptTensor<T> bias);

template <typename T>
void linear_backward_into(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db);

/// Plain matrix product of row-major (M,K) and (K,N).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// ---------------------------------------------------------------- layout helpers

/// (B, C, H, W) -> (B*H*W, C) token matrix and back.
template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, std::size_t batch, std::size_t h, std::size_t w);

/// Channel slice [c0, c0+n) of an NCHW tensor, and channel concatenation.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t c0, std::size_t n);
template <typename T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace uidkat
