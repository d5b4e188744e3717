#pragma once

// Group-rational KAN layer: a safe Pade activation
//
//   F(x) = (a0 + a1 x + ... + am x^m) / (1 + |b1 x + ... + bn x^n|)
//
// whose coefficients are shared by contiguous groups of channels, followed by
// a dense linear map. The per-edge scale of the KAN formulation is folded
// into the linear weight.

#include <span>
#include <string>
#include <vector>

#include "uidkat/param.hpp"

namespace uidkat {

enum class RationalInit { kIdentity, kFitSilu };

RationalInit parse_rational_init(std::string_view name);
std::string_view rational_init_name(RationalInit mode);

inline constexpr std::size_t kDefaultNumOrder = 5;
inline constexpr std::size_t kDefaultDenOrder = 4;
inline constexpr std::size_t kDefaultGroups = 8;

template <typename T>
struct RationalParams {
  RationalParams() = default;
  RationalParams(const std::string& prefix, std::size_t groups,
                 std::size_t num_order = kDefaultNumOrder,
                 std::size_t den_order = kDefaultDenOrder);

  std::size_t groups = 0;
  std::size_t num_order = 0;
  std::size_t den_order = 0;
  Param<T> a;  // (groups, num_order + 1)
  Param<T> b;  // (groups, den_order)

  /// Copies the same coefficients into every group.
  void set_all(std::span<const double> numer, std::span<const double> denom);
  void collect(ParamRefs<T>& out) { out.push_back(&a), out.push_back(&b); }
};

/// Scalar safe Pade unit (Horner evaluation).
double safe_pade(std::span<const double> numer, std::span<const double> denom, double x);

/// Applies the activation of group `g` to every element of x.
template <typename T>
Tensor<T> rational_eval_group(const Tensor<T>& x, const RationalParams<T>& params, std::size_t g);

/// Applies the grouped activation to a (N, d) token matrix; channel c uses
/// group c / (d / groups).
template <typename T>
Tensor<T> rational_eval(const Tensor<T>& x, const RationalParams<T>& params);

template <typename T>
struct RationalGrads {
  Tensor<T> input;
  Tensor<T> a;
  Tensor<T> b;
};

/// Exact gradients; the subgradient of |.| at 0 is taken as 0.
template <typename T>
RationalGrads<T> rational_backward(const Tensor<T>& x, const RationalParams<T>& params,
                                   const Tensor<T>& upstream);

/// Accumulating variant: dx may be null; da/db accumulate into the given tensors.
template <typename T>
void rational_backward_into(const Tensor<T>& x, const RationalParams<T>& params,
                            const Tensor<T>& upstream, Tensor<T>* dx, Tensor<T>* da,
                            Tensor<T>* db);

struct RationalFit {
  std::vector<double> numer;
  std::vector<double> denom;
  double max_abs_error = 0.0;
};

/// Least-squares fit of silu on [-range, range] with `samples` uniform points,
/// via the linearised problem P(x) - silu(x) * Qt(x) = silu(x).
RationalFit fit_silu(std::size_t num_order = kDefaultNumOrder,
                     std::size_t den_order = kDefaultDenOrder, std::size_t samples = 501,
                     double range = 3.0);

template <typename T>
struct GRKANLayer {
  GRKANLayer() = default;
  GRKANLayer(const std::string& prefix, std::size_t d_in, std::size_t d_out, std::size_t groups,
             std::size_t num_order = kDefaultNumOrder, std::size_t den_order = kDefaultDenOrder);

  std::size_t d_in = 0;
  std::size_t d_out = 0;
  RationalParams<T> rational;
  Param<T> weight;  // (d_out, d_in)
  Param<T> bias;    // (d_out)

  void collect(ParamRefs<T>& out) {
    rational.collect(out);
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
GRKANLayer<T> grkan_init(std::size_t d_in, std::size_t d_out, std::size_t groups,
                         RationalInit mode, Rng& rng, const std::string& prefix = "grkan",
                         std::size_t num_order = kDefaultNumOrder,
                         std::size_t den_order = kDefaultDenOrder);

template <typename T>
struct GRKANCache {
  Tensor<T> input;
  Tensor<T> activated;
};

template <typename T>
Tensor<T> grkan_forward(const Tensor<T>& tokens, const GRKANLayer<T>& layer,
                        GRKANCache<T>* cache = nullptr);

/// Returns the input gradient and accumulates coefficient/weight gradients.
template <typename T>
Tensor<T> grkan_backward(GRKANLayer<T>& layer, const GRKANCache<T>& cache, const Tensor<T>& dy);

/// Multiply-accumulates of one rational evaluation.
inline std::size_t rational_macs(std::size_t num_order, std::size_t den_order) {
  return num_order + den_order + 2;
}

}  // namespace uidkat
