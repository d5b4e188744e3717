#include "uidkat/grkan.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "uidkat/ops.hpp"

namespace uidkat {

RationalInit parse_rational_init(std::string_view name) {
  if (name == "identity") return RationalInit::kIdentity;
  if (name == "fit_silu") return RationalInit::kFitSilu;
  throw ShapeError("unknown rational init mode '" + std::string(name) + "'");
}

std::string_view rational_init_name(RationalInit mode) {
  return mode == RationalInit::kIdentity ? "identity" : "fit_silu";
}

template <typename T>
RationalParams<T>::RationalParams(const std::string& prefix, std::size_t g, std::size_t m,
                                  std::size_t n)
    : groups(g),
      num_order(m),
      den_order(n),
      a(prefix + ".rational.a", {g, m + 1}),
      b(prefix + ".rational.b", {g, n}) {
  if (g == 0) throw ShapeError("rational: group count must be >= 1");
}

template <typename T>
void RationalParams<T>::set_all(std::span<const double> numer, std::span<const double> denom) {
  if (numer.size() != num_order + 1 || denom.size() != den_order) {
    throw ShapeError("rational: coefficient count does not match orders");
  }
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i <= num_order; ++i) {
      a.value[g * (num_order + 1) + i] = static_cast<T>(numer[i]);
    }
    for (std::size_t k = 0; k < den_order; ++k) {
      b.value[g * den_order + k] = static_cast<T>(denom[k]);
    }
  }
}

double safe_pade(std::span<const double> numer, std::span<const double> denom, double x) {
  double p = 0.0;
  for (std::size_t i = numer.size(); i-- > 0;) p = p * x + numer[i];
  double s = 0.0;
  for (std::size_t k = denom.size(); k-- > 0;) s = (s + denom[k]) * x;
  return p / (1.0 + std::abs(s));
}

namespace {

// Evaluates one element; coefficient pointers address a single group.
template <typename T>
inline T eval_one(const T* a, std::size_t m, const T* b, std::size_t n, T x) {
  T p = a[m];
  for (std::size_t i = m; i-- > 0;) p = p * x + a[i];
  T s = 0;
  for (std::size_t k = n; k-- > 0;) s = (s + b[k]) * x;
  return p / (T(1) + std::abs(s));
}

template <typename T>
std::size_t group_width(const Tensor<T>& x, const RationalParams<T>& params) {
  if (x.rank() != 2) {
    throw ShapeError("rational_eval: expected (N, d) tokens, got " + shape_str(x.shape()));
  }
  if (x.dim(1) % params.groups != 0) {
    throw ShapeError("rational_eval: " + std::to_string(x.dim(1)) +
                     " channels not divisible by " + std::to_string(params.groups) + " groups");
  }
  return x.dim(1) / params.groups;
}

template <typename T>
void backward_one(const T* a, std::size_t m, const T* b, std::size_t n, T x, T up, T* dx,
                  T* da, T* db) {
  T p = a[m], dp = 0;
  for (std::size_t i = m; i-- > 0;) {
    dp = dp * x + p;
    p = p * x + a[i];
  }
  // s = sum_k b_k x^k (k = 1..n) and its derivative.
  T s = 0, ds = 0;
  for (std::size_t k = n; k-- > 0;) s = (s + b[k]) * x;
  for (std::size_t k = n; k-- > 0;) ds = ds * x + static_cast<T>(k + 1) * b[k];
  const T sgn = s > 0 ? T(1) : (s < 0 ? T(-1) : T(0));
  const T q = T(1) + std::abs(s);
  const T inv_q = T(1) / q;
  if (dx) *dx += up * (dp * inv_q - p * sgn * ds * inv_q * inv_q);
  T xi = 1;
  for (std::size_t i = 0; i <= m; ++i) {
    da[i] += up * xi * inv_q;
    xi *= x;
  }
  const T coeff = -up * p * sgn * inv_q * inv_q;
  T xk = x;
  for (std::size_t k = 0; k < n; ++k) {
    db[k] += coeff * xk;
    xk *= x;
  }
}

}  // namespace

template <typename T>
Tensor<T> rational_eval_group(const Tensor<T>& x, const RationalParams<T>& params,
                              std::size_t g) {
  if (g >= params.groups) throw ShapeError("rational_eval: group index out of range");
  const std::size_t m = params.num_order, n = params.den_order;
  const T* a = params.a.value.data() + g * (m + 1);
  const T* b = params.b.value.data() + g * n;
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = eval_one(a, m, b, n, x[i]);
  check_finite(y, "rational_eval");
  return y;
}

template <typename T>
Tensor<T> rational_eval(const Tensor<T>& x, const RationalParams<T>& params) {
  const std::size_t width = group_width(x, params);
  const std::size_t N = x.dim(0), d = x.dim(1);
  const std::size_t m = params.num_order, n = params.den_order;
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t r = 0; r < N; ++r) {
    const T* xr = x.data() + r * d;
    T* yr = y.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t g = c / width;
      yr[c] = eval_one(params.a.value.data() + g * (m + 1), m, params.b.value.data() + g * n, n,
                       xr[c]);
    }
  }
  check_finite(y, "rational_eval");
  return y;
}

template <typename T>
void rational_backward_into(const Tensor<T>& x, const RationalParams<T>& params,
                            const Tensor<T>& upstream, Tensor<T>* dx, Tensor<T>* da,
                            Tensor<T>* db) {
  const std::size_t width = group_width(x, params);
  expect_shape(upstream.shape(), x.shape(), "rational_backward upstream");
  if (dx) expect_shape(dx->shape(), x.shape(), "rational_backward grad_input");
  expect_shape(da->shape(), params.a.value.shape(), "rational_backward grad_a");
  expect_shape(db->shape(), params.b.value.shape(), "rational_backward grad_b");
  const std::size_t N = x.dim(0), d = x.dim(1);
  const std::size_t m = params.num_order, n = params.den_order;
  for (std::size_t r = 0; r < N; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t g = c / width;
      const std::size_t idx = r * d + c;
      backward_one(params.a.value.data() + g * (m + 1), m, params.b.value.data() + g * n, n,
                   x[idx], upstream[idx], dx ? dx->data() + idx : nullptr,
                   da->data() + g * (m + 1), db->data() + g * n);
    }
  }
}

template <typename T>
RationalGrads<T> rational_backward(const Tensor<T>& x, const RationalParams<T>& params,
                                   const Tensor<T>& upstream) {
  RationalGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(params.a.value),
                     Tensor<T>::zeros_like(params.b.value)};
  rational_backward_into(x, params, upstream, &g.input, &g.a, &g.b);
  return g;
}

RationalFit fit_silu(std::size_t num_order, std::size_t den_order, std::size_t samples,
                     double range) {
  const std::size_t cols = num_order + 1 + den_order;
  Eigen::MatrixXd A(samples, cols);
  Eigen::VectorXd f(samples);
  std::vector<double> xs(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const double x = -range + 2.0 * range * static_cast<double>(s) /
                                  static_cast<double>(samples - 1);
    xs[s] = x;
    f[static_cast<long>(s)] = activation_scalar(Activation::kSilu, x);
    double xp = 1.0;
    for (std::size_t i = 0; i <= num_order; ++i, xp *= x) {
      A(static_cast<long>(s), static_cast<long>(i)) = xp;
    }
    xp = x;
    for (std::size_t k = 0; k < den_order; ++k, xp *= x) {
      A(static_cast<long>(s), static_cast<long>(num_order + 1 + k)) =
          -f[static_cast<long>(s)] * xp;
    }
  }
  const Eigen::VectorXd sol = A.colPivHouseholderQr().solve(f);
  RationalFit fit;
  fit.numer.assign(sol.data(), sol.data() + num_order + 1);
  fit.denom.assign(sol.data() + num_order + 1, sol.data() + cols);
  for (std::size_t s = 0; s < samples; ++s) {
    fit.max_abs_error = std::max(
        fit.max_abs_error, std::abs(safe_pade(fit.numer, fit.denom, xs[s]) - f[static_cast<long>(s)]));
  }
  return fit;
}

template <typename T>
GRKANLayer<T>::GRKANLayer(const std::string& prefix, std::size_t in, std::size_t out,
                          std::size_t groups, std::size_t m, std::size_t n)
    : d_in(in),
      d_out(out),
      rational(prefix, groups, m, n),
      weight(prefix + ".weight", {out, in}),
      bias(prefix + ".bias", {out}) {
  if (in % groups != 0) {
    throw ShapeError("grkan: d_in=" + std::to_string(in) + " not divisible by " +
                     std::to_string(groups) + " groups");
  }
}

template <typename T>
GRKANLayer<T> grkan_init(std::size_t d_in, std::size_t d_out, std::size_t groups,
                         RationalInit mode, Rng& rng, const std::string& prefix,
                         std::size_t num_order, std::size_t den_order) {
  GRKANLayer<T> layer(prefix, d_in, d_out, groups, num_order, den_order);
  if (mode == RationalInit::kIdentity) {
    std::vector<double> numer(num_order + 1, 0.0), denom(den_order, 0.0);
    if (num_order >= 1) numer[1] = 1.0;
    layer.rational.set_all(numer, denom);
  } else {
    const RationalFit fit = fit_silu(num_order, den_order);
    layer.rational.set_all(fit.numer, fit.denom);
  }
  init_fan_in(layer.weight.value, d_in, rng);
  return layer;
}

template <typename T>
Tensor<T> grkan_forward(const Tensor<T>& tokens, const GRKANLayer<T>& layer,
                        GRKANCache<T>* cache) {
  if (tokens.rank() != 2 || tokens.dim(1) != layer.d_in) {
    throw ShapeError("grkan_forward: expected (N, " + std::to_string(layer.d_in) +
                     ") tokens, got " + shape_str(tokens.shape()));
  }
  Tensor<T> act = rational_eval(tokens, layer.rational);
  Tensor<T> y = linear(act, layer.weight.value, &layer.bias.value);
  if (cache) {
    cache->input = tokens;
    cache->activated = std::move(act);
  }
  return y;
}

template <typename T>
Tensor<T> grkan_backward(GRKANLayer<T>& layer, const GRKANCache<T>& cache, const Tensor<T>& dy) {
  Tensor<T> dact = Tensor<T>::zeros_like(cache.activated);
  linear_backward_into(cache.activated, layer.weight.value, dy, &dact, &layer.weight.grad,
                       &layer.bias.grad);
  Tensor<T> dx = Tensor<T>::zeros_like(cache.input);
  rational_backward_into(cache.input, layer.rational, dact, &dx, &layer.rational.a.grad,
                         &layer.rational.b.grad);
  return dx;
}

#define UIDKAT_INSTANTIATE_GRKAN(T)                                                          \
  template struct RationalParams<T>;                                                         \
  template struct GRKANLayer<T>;                                                             \
  template Tensor<T> rational_eval_group(const Tensor<T>&, const RationalParams<T>&,        \
                                         std::size_t);                                       \
  template Tensor<T> rational_eval(const Tensor<T>&, const RationalParams<T>&);              \
  template RationalGrads<T> rational_backward(const Tensor<T>&, const RationalParams<T>&,   \
                                              const Tensor<T>&);                             \
  template void rational_backward_into(const Tensor<T>&, const RationalParams<T>&,          \
                                       const Tensor<T>&, Tensor<T>*, Tensor<T>*, Tensor<T>*); \
  template GRKANLayer<T> grkan_init(std::size_t, std::size_t, std::size_t, RationalInit,    \
                                    Rng&, const std::string&, std::size_t, std::size_t);     \
  template Tensor<T> grkan_forward(const Tensor<T>&, const GRKANLayer<T>&, GRKANCache<T>*); \
  template Tensor<T> grkan_backward(GRKANLayer<T>&, const GRKANCache<T>&, const Tensor<T>&);

UIDKAT_INSTANTIATE_GRKAN(float)
UIDKAT_INSTANTIATE_GRKAN(double)

}  // namespace uidkat
