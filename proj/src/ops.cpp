#include "uidkat/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>

namespace uidkat {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const Mat<T>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank(const Shape& s, std::size_t r, const char* what) {
  require(s.size() == r, std::string(what) + ": expected rank " + std::to_string(r) +
                             " tensor, got " + shape_str(s));
}

// Maps a padded coordinate to the source index, or -1 for zero padding.
inline long source_index(long i, long n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PadMode::kZero) return -1;
  if (i < 0) return -i;
  return 2 * n - 2 - i;
}

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Conv2dSpec& spec) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " + shape_str(w.shape()));
  require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                    " channels but weight expects " + std::to_string(w.dim(1)));
  require(spec.stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t k = w.dim(2);
  require(x.dim(2) + 2 * spec.padding >= k && x.dim(3) + 2 * spec.padding >= k,
          "conv2d: padded input " + shape_str(x.shape()) + " smaller than kernel " +
              std::to_string(k));
  if (spec.pad_mode == PadMode::kReflect) {
    require(spec.padding < x.dim(2) && spec.padding < x.dim(3),
            "conv2d: reflect padding must be smaller than the spatial size");
  }
  return {x.dim(0),
          x.dim(1),
          x.dim(2),
          x.dim(3),
          w.dim(0),
          k,
          conv_out_size(x.dim(2), k, spec.stride, spec.padding),
          conv_out_size(x.dim(3), k, spec.stride, spec.padding)};
}

bool is_pointwise(const ConvGeom& g, const Conv2dSpec& spec) {
  return g.k == 1 && spec.stride == 1 && spec.padding == 0;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, const Conv2dSpec& spec, T* col) {
  const long s = static_cast<long>(spec.stride);
  const long pad = static_cast<long>(spec.padding);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  const std::size_t P = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((ci * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = source_index(static_cast<long>(oh) * s - pad + static_cast<long>(ki), H,
                                       spec.pad_mode);
          T* out = row + oh * g.wo;
          if (ih < 0) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* xr = xc + ih * W;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = source_index(static_cast<long>(ow) * s - pad + static_cast<long>(kj),
                                         W, spec.pad_mode);
            out[ow] = iw < 0 ? T(0) : xr[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, const Conv2dSpec& spec, T* dx) {
  const long s = static_cast<long>(spec.stride);
  const long pad = static_cast<long>(spec.padding);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  const std::size_t P = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((ci * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = source_index(static_cast<long>(oh) * s - pad + static_cast<long>(ki), H,
                                       spec.pad_mode);
          if (ih < 0) continue;
          T* xr = xc + ih * W;
          const T* in = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = source_index(static_cast<long>(ow) * s - pad + static_cast<long>(kj),
                                         W, spec.pad_mode);
            if (iw >= 0) xr[iw] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, OptTensor<T> bias,
                 const Conv2dSpec& spec) {
  const ConvGeom g = conv_geometry(x, w, spec);
  if (bias) expect_shape(bias->shape(), {g.cout}, "conv2d bias");
  const std::size_t K = g.cin * g.k * g.k;
  const std::size_t P = g.ho * g.wo;
  Tensor<T> y({g.batch, g.cout, g.ho, g.wo});
  std::vector<T> col(is_pointwise(g, spec) ? 0 : K * P);
  CMapMat<T> wt(w.data(), K, g.cout);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* xb = x.data() + b * g.cin * g.h * g.w;
    const T* cp = xb;
    if (!col.empty()) {
      im2col(xb, g, spec, col.data());
      cp = col.data();
    }
    MapMat<T> yb(y.data() + b * g.cout * P, P, g.cout);
    yb.noalias() = CMapMat<T>(cp, P, K) * wt;
    if (bias) {
      for (std::size_t c = 0; c < g.cout; ++c) yb.col(c).array() += (*bias)[c];
    }
  }
  check_finite(y, "conv2d");
  return y;
}

template <typename T>
void conv2d_backward_into(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          const Conv2dSpec& spec, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const ConvGeom g = conv_geometry(x, w, spec);
  expect_shape(dy.shape(), {g.batch, g.cout, g.ho, g.wo}, "conv2d_backward upstream gradient");
  if (dx) expect_shape(dx->shape(), x.shape(), "conv2d_backward grad_input");
  if (dw) expect_shape(dw->shape(), w.shape(), "conv2d_backward grad_weight");
  if (db) expect_shape(db->shape(), {g.cout}, "conv2d_backward grad_bias");
  const std::size_t K = g.cin * g.k * g.k;
  const std::size_t P = g.ho * g.wo;
  const bool pointwise = is_pointwise(g, spec);
  std::vector<T> col(pointwise || !dw ? 0 : K * P);
  std::vector<T> dcol(pointwise || !dx ? 0 : K * P);
  CMapMat<T> wt(w.data(), K, g.cout);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* xb = x.data() + b * g.cin * g.h * g.w;
    CMapMat<T> dyb(dy.data() + b * g.cout * P, P, g.cout);
    if (dw) {
      const T* cp = xb;
      if (!pointwise) {
        im2col(xb, g, spec, col.data());
        cp = col.data();
      }
      MapMat<T>(dw->data(), K, g.cout).noalias() += CMapMat<T>(cp, P, K).transpose() * dyb;
    }
    if (db) {
      for (std::size_t c = 0; c < g.cout; ++c) (*db)[c] += dyb.col(c).sum();
    }
    if (dx) {
      T* dxb = dx->data() + b * g.cin * g.h * g.w;
      if (pointwise) {
        MapMat<T>(dxb, P, K).noalias() += dyb * wt.transpose();
      } else {
        MapMat<T>(dcol.data(), P, K).noalias() = dyb * wt.transpose();
        col2im(dcol.data(), g, spec, dxb);
      }
    }
  }
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               const Conv2dSpec& spec) {
  Conv2dGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(w),
                   Tensor<T>::zeros({w.dim(0)})};
  conv2d_backward_into(x, w, dy, spec, &g.input, &g.weight, &g.bias);
  return g;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 4, "pixel_shuffle");
  require(r >= 1 && x.dim(1) % (r * r) == 0,
          "pixel_shuffle: channels " + std::to_string(x.dim(1)) + " not divisible by r^2=" +
              std::to_string(r * r));
  const std::size_t B = x.dim(0), C = x.dim(1) / (r * r), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({B, C, H * r, W * r});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t di = 0; di < r; ++di)
        for (std::size_t dj = 0; dj < r; ++dj)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
              y.at(b, c, r * i + di, r * j + dj) = x.at(b, c * r * r + di * r + dj, i, j);
  return y;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 4, "pixel_unshuffle");
  require(r >= 1 && x.dim(2) % r == 0 && x.dim(3) % r == 0,
          "pixel_unshuffle: spatial size " + shape_str(x.shape()) + " not divisible by " +
              std::to_string(r));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2) / r, W = x.dim(3) / r;
  Tensor<T> y({B, C * r * r, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t di = 0; di < r; ++di)
        for (std::size_t dj = 0; dj < r; ++dj)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
              y.at(b, c * r * r + di * r + dj, i, j) = x.at(b, c, r * i + di, r * j + dj);
  return y;
}

// ---------------------------------------------------------------- norms

namespace {

// Normalises `rows` contiguous groups of `len` elements each; channel of
// group i for the affine is channel_of(i).
template <typename T, typename ChannelOf>
Tensor<T> normalize_groups(const Tensor<T>& x, std::size_t rows, std::size_t len,
                           const Tensor<T>* gamma, const Tensor<T>* beta, NormCache<T>* cache,
                           double eps, ChannelOf channel_of) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  if (cache) {
    cache->mean.assign(rows, T(0));
    cache->rstd.assign(rows, T(0));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xp = x.data() + i * len;
    T* yp = y.data() + i * len;
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) sum += xp[j];
    const double mean = sum / static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double d = xp[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(len);
    const double rstd = 1.0 / std::sqrt(var + eps);
    const std::size_t c = channel_of(i);
    const double g = gamma ? static_cast<double>((*gamma)[c]) : 1.0;
    const double bb = beta ? static_cast<double>((*beta)[c]) : 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      yp[j] = static_cast<T>((xp[j] - mean) * rstd * g + bb);
    }
    if (cache) {
      cache->mean[i] = static_cast<T>(mean);
      cache->rstd[i] = static_cast<T>(rstd);
    }
  }
  return y;
}

template <typename T, typename ChannelOf>
void normalize_groups_backward(const Tensor<T>& x, std::size_t rows, std::size_t len,
                               const NormCache<T>& cache, const Tensor<T>* gamma,
                               const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>* dgamma,
                               Tensor<T>* dbeta, ChannelOf channel_of) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xp = x.data() + i * len;
    const T* gp = dy.data() + i * len;
    T* dxp = dx.data() + i * len;
    const std::size_t c = channel_of(i);
    const double g = gamma ? static_cast<double>((*gamma)[c]) : 1.0;
    const double mean = cache.mean[i];
    const double rstd = cache.rstd[i];
    double sum_g = 0.0, sum_gx = 0.0, sum_dy = 0.0, sum_dyx = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double xhat = (xp[j] - mean) * rstd;
      sum_dy += gp[j];
      sum_dyx += gp[j] * xhat;
    }
    sum_g = sum_dy * g;
    sum_gx = sum_dyx * g;
    const double inv_n = 1.0 / static_cast<double>(len);
    for (std::size_t j = 0; j < len; ++j) {
      const double xhat = (xp[j] - mean) * rstd;
      dxp[j] += static_cast<T>(rstd * (gp[j] * g - sum_g * inv_n - xhat * sum_gx * inv_n));
    }
    if (dgamma) (*dgamma)[c] += static_cast<T>(sum_dyx);
    if (dbeta) (*dbeta)[c] += static_cast<T>(sum_dy);
  }
}

}  // namespace

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, OptTensor<T> gamma, OptTensor<T> beta,
                        NormCache<T>* cache, double eps) {
  require_rank(x.shape(), 4, "instance_norm");
  const std::size_t C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(HW >= 2, "instance_norm: spatial size " + shape_str(x.shape()) +
                       " is 1x1; normalising a single pixel is degenerate");
  if (gamma) expect_shape(gamma->shape(), {C}, "instance_norm gamma");
  if (beta) expect_shape(beta->shape(), {C}, "instance_norm beta");
  auto y = normalize_groups(x, x.dim(0) * C, HW, gamma, beta, cache, eps,
                            [C](std::size_t i) { return i % C; });
  check_finite(y, "instance_norm");
  return y;
}

template <typename T>
void instance_norm_backward(const Tensor<T>& x, const NormCache<T>& cache,
                            OptTensor<T> gamma, const Tensor<T>& dy, Tensor<T>& dx,
                            OptGrad<T> dgamma, OptGrad<T> dbeta) {
  expect_shape(dy.shape(), x.shape(), "instance_norm_backward");
  expect_shape(dx.shape(), x.shape(), "instance_norm_backward grad_input");
  const std::size_t C = x.dim(1);
  normalize_groups_backward(x, x.dim(0) * C, x.dim(2) * x.dim(3), cache, gamma, dy, dx, dgamma,
                            dbeta, [C](std::size_t i) { return i % C; });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, OptTensor<T> gamma, OptTensor<T> beta,
                     NormCache<T>* cache, double eps) {
  require_rank(x.shape(), 2, "layer_norm");
  const std::size_t C = x.dim(1);
  require(C >= 2, "layer_norm: need at least 2 channels");
  if (gamma) expect_shape(gamma->shape(), {C}, "layer_norm gamma");
  if (beta) expect_shape(beta->shape(), {C}, "layer_norm beta");
  // Affine is per channel within the row, so apply it after normalising.
  auto y = normalize_groups(x, x.dim(0), C, static_cast<const Tensor<T>*>(nullptr),
                            static_cast<const Tensor<T>*>(nullptr), cache, eps,
                            [](std::size_t) { return std::size_t{0}; });
  if (gamma || beta) {
    for (std::size_t n = 0; n < x.dim(0); ++n) {
      T* row = y.data() + n * C;
      for (std::size_t c = 0; c < C; ++c) {
        row[c] = row[c] * (gamma ? (*gamma)[c] : T(1)) + (beta ? (*beta)[c] : T(0));
      }
    }
  }
  check_finite(y, "layer_norm");
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const NormCache<T>& cache, OptTensor<T> gamma,
                         const Tensor<T>& dy, Tensor<T>& dx, OptGrad<T> dgamma,
                         OptGrad<T> dbeta) {
  expect_shape(dy.shape(), x.shape(), "layer_norm_backward");
  expect_shape(dx.shape(), x.shape(), "layer_norm_backward grad_input");
  const std::size_t N = x.dim(0), C = x.dim(1);
  const double inv_c = 1.0 / static_cast<double>(C);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xp = x.data() + n * C;
    const T* gp = dy.data() + n * C;
    T* dxp = dx.data() + n * C;
    const double mean = cache.mean[n], rstd = cache.rstd[n];
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double xhat = (xp[c] - mean) * rstd;
      const double g = gp[c] * (gamma ? static_cast<double>((*gamma)[c]) : 1.0);
      sum_g += g;
      sum_gx += g * xhat;
      if (dgamma) (*dgamma)[c] += static_cast<T>(gp[c] * xhat);
      if (dbeta) (*dbeta)[c] += gp[c];
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double xhat = (xp[c] - mean) * rstd;
      const double g = gp[c] * (gamma ? static_cast<double>((*gamma)[c]) : 1.0);
      dxp[c] += static_cast<T>(rstd * (g - sum_g * inv_c - xhat * sum_gx * inv_c));
    }
  }
}

// ---------------------------------------------------------------- activations

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "lrelu") return Activation::kLeakyRelu;
  if (name == "lrelu0.2") return Activation::kLeakyRelu02;
  if (name == "gelu") return Activation::kGelu;
  if (name == "silu") return Activation::kSilu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "tanh") return Activation::kTanh;
  throw ShapeError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "lrelu";
    case Activation::kLeakyRelu02: return "lrelu0.2";
    case Activation::kGelu: return "gelu";
    case Activation::kSilu: return "silu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

namespace {

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double forward_scalar(Activation a, double x) {
  switch (a) {
    case Activation::kIdentity: return x;
    case Activation::kRelu: return x > 0 ? x : 0.0;
    case Activation::kLeakyRelu: return x > 0 ? x : 0.1 * x;
    case Activation::kLeakyRelu02: return x > 0 ? x : 0.2 * x;
    case Activation::kGelu: return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    case Activation::kSilu: return x * sigmoid(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kTanh: return std::tanh(x);
  }
  return x;
}

inline double derivative_scalar(Activation a, double x, double y) {
  switch (a) {
    case Activation::kIdentity: return 1.0;
    case Activation::kRelu: return x > 0 ? 1.0 : 0.0;
    case Activation::kLeakyRelu: return x > 0 ? 1.0 : 0.1;
    case Activation::kLeakyRelu02: return x > 0 ? 1.0 : 0.2;
    case Activation::kGelu: {
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
    }
    case Activation::kSilu: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::kSigmoid: return y * (1.0 - y);
    case Activation::kTanh: return 1.0 - y * y;
  }
  return 1.0;
}

}  // namespace

double activation_scalar(Activation a, double x) { return forward_scalar(a, x); }

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  const std::size_t n = x.numel();
  if constexpr (std::is_same_v<T, float>) {
    // Float path avoids double transcendental calls for the common kinds.
    for (std::size_t i = 0; i < n; ++i) {
      const float v = x[i];
      switch (kind) {
        case Activation::kSilu: y[i] = v / (1.0f + std::exp(-v)); break;
        case Activation::kTanh: y[i] = std::tanh(v); break;
        case Activation::kSigmoid:
          y[i] = v >= 0 ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
          break;
        default: y[i] = static_cast<float>(forward_scalar(kind, v));
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<T>(forward_scalar(kind, x[i]));
  }
  check_finite(y, "activation");
  return y;
}

template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& dy,
                              Activation kind) {
  expect_shape(dy.shape(), x.shape(), "activation_backward");
  Tensor<T> dx = Tensor<T>::zeros_like(x);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] = static_cast<T>(dy[i] * derivative_scalar(kind, x[i], y[i]));
  }
  return dx;
}

// ---------------------------------------------------------------- resampling

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 4, "avg_pool");
  require(r >= 1 && x.dim(2) % r == 0 && x.dim(3) % r == 0,
          "avg_pool: spatial size " + shape_str(x.shape()) + " not divisible by " +
              std::to_string(r));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2) / r, W = x.dim(3) / r;
  Tensor<T> y({B, C, H, W});
  const T inv = T(1) / static_cast<T>(r * r);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          T s = 0;
          for (std::size_t di = 0; di < r; ++di)
            for (std::size_t dj = 0; dj < r; ++dj) s += x.at(b, c, i * r + di, j * r + dj);
          y.at(b, c, i, j) = s * inv;
        }
  return y;
}

template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, std::size_t r) {
  const std::size_t B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
  Tensor<T> dx({B, C, H * r, W * r});
  const T inv = T(1) / static_cast<T>(r * r);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * r; ++i)
        for (std::size_t j = 0; j < W * r; ++j) dx.at(b, c, i, j) = dy.at(b, c, i / r, j / r) * inv;
  return dx;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 4, "upsample_nearest");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({B, C, H * r, W * r});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * r; ++i)
        for (std::size_t j = 0; j < W * r; ++j) y.at(b, c, i, j) = x.at(b, c, i / r, j / r);
  return y;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, std::size_t r) {
  require(dy.dim(2) % r == 0 && dy.dim(3) % r == 0, "upsample_nearest_backward: bad shape");
  const std::size_t B = dy.dim(0), C = dy.dim(1), H = dy.dim(2) / r, W = dy.dim(3) / r;
  Tensor<T> dx({B, C, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * r; ++i)
        for (std::size_t j = 0; j < W * r; ++j) dx.at(b, c, i / r, j / r) += dy.at(b, c, i, j);
  return dx;
}

// ---------------------------------------------------------------- dense

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, OptTensor<T> bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  require(x.dim(1) == w.dim(1), "linear: input width " + std::to_string(x.dim(1)) +
                                    " does not match weight " + shape_str(w.shape()));
  const std::size_t N = x.dim(0), Din = w.dim(1), Dout = w.dim(0);
  if (bias) expect_shape(bias->shape(), {Dout}, "linear bias");
  Tensor<T> y({N, Dout});
  MapMat<T> ym(y.data(), Dout, N);
  ym.noalias() = CMapMat<T>(w.data(), Din, Dout).transpose() * CMapMat<T>(x.data(), Din, N);
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias->data(), Dout);
    ym.colwise() += bv;
  }
  check_finite(y, "linear");
  return y;
}

template <typename T>
void linear_backward_into(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t N = x.dim(0), Din = w.dim(1), Dout = w.dim(0);
  expect_shape(dy.shape(), {N, Dout}, "linear_backward upstream gradient");
  CMapMat<T> dym(dy.data(), Dout, N);
  if (dx) {
    expect_shape(dx->shape(), x.shape(), "linear_backward grad_input");
    MapMat<T>(dx->data(), Din, N).noalias() += CMapMat<T>(w.data(), Din, Dout) * dym;
  }
  if (dw) {
    expect_shape(dw->shape(), w.shape(), "linear_backward grad_weight");
    MapMat<T>(dw->data(), Din, Dout).noalias() +=
        CMapMat<T>(x.data(), Din, N) * dym.transpose();
  }
  if (db) {
    expect_shape(db->shape(), {Dout}, "linear_backward grad_bias");
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db->data(), Dout) += dym.rowwise().sum();
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> c({M, N});
  // Row-major (M,K) is column-major (K,M).
  MapMat<T>(c.data(), N, M).noalias() =
      CMapMat<T>(b.data(), N, K) * CMapMat<T>(a.data(), K, M);
  return c;
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "nchw_to_tokens");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> t({B * HW, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = x.data() + (b * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) t[(b * HW + p) * C + c] = src[p];
    }
  return t;
}

template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, std::size_t batch, std::size_t h, std::size_t w) {
  require_rank(t.shape(), 2, "tokens_to_nchw");
  require(t.dim(0) == batch * h * w, "tokens_to_nchw: token count " + std::to_string(t.dim(0)) +
                                         " != " + std::to_string(batch * h * w));
  const std::size_t C = t.dim(1), HW = h * w;
  Tensor<T> x({batch, C, h, w});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T* dst = x.data() + (b * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) dst[p] = t[(b * HW + p) * C + c];
    }
  return x;
}

template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t c0, std::size_t n) {
  require_rank(x.shape(), 4, "channel_slice");
  require(c0 + n <= x.dim(1), "channel_slice: range out of bounds");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({B, n, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(x.data() + (b * C + c0) * HW, n * HW, y.data() + b * n * HW);
  }
  return y;
}

template <typename T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 4, "channel_concat");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "channel_concat: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> y({B, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(a.data() + i * Ca * HW, Ca * HW, y.data() + i * (Ca + Cb) * HW);
    std::copy_n(b.data() + i * Cb * HW, Cb * HW, y.data() + (i * (Ca + Cb) + Ca) * HW);
  }
  return y;
}

#define UIDKAT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,             \
                            const Conv2dSpec&);                                                \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                          const Conv2dSpec&);                                  \
  template void conv2d_backward_into(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     const Conv2dSpec&, Tensor<T>*, Tensor<T>*, Tensor<T>*);   \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>*, const Tensor<T>*,      \
                                   NormCache<T>*, double);                                     \
  template void instance_norm_backward(const Tensor<T>&, const NormCache<T>&, const Tensor<T>*, \
                                       const Tensor<T>&, Tensor<T>&, Tensor<T>*, Tensor<T>*);  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>*, const Tensor<T>*,         \
                                NormCache<T>*, double);                                        \
  template void layer_norm_backward(const Tensor<T>&, const NormCache<T>&, const Tensor<T>*,  \
                                    const Tensor<T>&, Tensor<T>&, Tensor<T>*, Tensor<T>*);     \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                 \
  template Tensor<T> activation_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         Activation);                                          \
  template Tensor<T> avg_pool(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> avg_pool_backward(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> upsample_nearest_backward(const Tensor<T>&, std::size_t);                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);             \
  template void linear_backward_into(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     Tensor<T>*, Tensor<T>*, Tensor<T>*);                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> nchw_to_tokens(const Tensor<T>&);                                         \
  template Tensor<T> tokens_to_nchw(const Tensor<T>&, std::size_t, std::size_t, std::size_t);  \
  template Tensor<T> channel_slice(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> channel_concat(const Tensor<T>&, const Tensor<T>&);

UIDKAT_INSTANTIATE_OPS(float)
UIDKAT_INSTANTIATE_OPS(double)

}  // namespace uidkat
