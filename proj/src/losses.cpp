#include "uidkat/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uidkat {

void LossWeights::validate() const {
  if (!(adv >= 0 && ide >= 0 && nce >= 0)) {
    throw ShapeError("loss weights must be nonnegative");
  }
}

template <typename T>
double lsgan_generator_loss(const Tensor<T>& fake, Tensor<T>* dfake) {
  const double n = static_cast<double>(fake.numel());
  double s = 0;
  for (std::size_t i = 0; i < fake.numel(); ++i) {
    const double d = static_cast<double>(fake[i]) - 1.0;
    s += d * d;
  }
  if (dfake) {
    *dfake = Tensor<T>::zeros_like(fake);
    for (std::size_t i = 0; i < fake.numel(); ++i) {
      (*dfake)[i] = static_cast<T>(2.0 * (static_cast<double>(fake[i]) - 1.0) / n);
    }
  }
  return s / n;
}

template <typename T>
double lsgan_discriminator_loss(const Tensor<T>& real, const Tensor<T>& fake, Tensor<T>* dreal,
                                Tensor<T>* dfake) {
  const double nr = static_cast<double>(real.numel()), nf = static_cast<double>(fake.numel());
  double sr = 0, sf = 0;
  for (std::size_t i = 0; i < real.numel(); ++i) {
    const double d = static_cast<double>(real[i]) - 1.0;
    sr += d * d;
  }
  for (std::size_t i = 0; i < fake.numel(); ++i) {
    const double d = static_cast<double>(fake[i]);
    sf += d * d;
  }
  if (dreal) {
    *dreal = Tensor<T>::zeros_like(real);
    for (std::size_t i = 0; i < real.numel(); ++i) {
      (*dreal)[i] = static_cast<T>(2.0 * (static_cast<double>(real[i]) - 1.0) / nr);
    }
  }
  if (dfake) {
    *dfake = Tensor<T>::zeros_like(fake);
    for (std::size_t i = 0; i < fake.numel(); ++i) {
      (*dfake)[i] = static_cast<T>(2.0 * static_cast<double>(fake[i]) / nf);
    }
  }
  return sr / nr + sf / nf;
}

template <typename T>
double identity_loss(const Tensor<T>& gen, const Tensor<T>& clean, Tensor<T>* dgen) {
  expect_shape(gen.shape(), clean.shape(), "identity_loss");
  const double n = static_cast<double>(gen.numel());
  double s = 0;
  for (std::size_t i = 0; i < gen.numel(); ++i) {
    s += std::abs(static_cast<double>(gen[i]) - static_cast<double>(clean[i]));
  }
  if (dgen) {
    *dgen = Tensor<T>::zeros_like(gen);
    for (std::size_t i = 0; i < gen.numel(); ++i) {
      const double d = static_cast<double>(gen[i]) - static_cast<double>(clean[i]);
      (*dgen)[i] = static_cast<T>(((d > 0) - (d < 0)) / n);
    }
  }
  return s / n;
}

namespace {

double norm_of(std::span<const double> v, const char* what) {
  double s = 0;
  for (double x : v) s += x * x;
  const double n = std::sqrt(s);
  if (!(n > 0) || !std::isfinite(n)) {
    throw NumericError(std::string("patch_nce: ") + what + " vector has zero or non-finite norm");
  }
  return n;
}

double cosine(std::span<const double> a, double na, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("patch_nce: vector dimensions differ");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return d / (na * norm_of(b, "key"));
}

}  // namespace

double patch_nce_single(std::span<const double> anchor, std::span<const double> positive,
                        const std::vector<std::span<const double>>& negatives, double tau) {
  if (negatives.empty()) throw ShapeError("patch_nce: need at least one negative");
  if (!(tau > 0)) throw ShapeError("patch_nce: temperature must be positive");
  const double na = norm_of(anchor, "anchor");
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(cosine(anchor, na, positive) / tau);
  for (const auto& n : negatives) logits.push_back(cosine(anchor, na, n) / tau);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double z : logits) s += std::exp(z - mx);
  return mx + std::log(s) - logits[0];
}

template <typename T>
double nce_rows(const Tensor<T>& q, const Tensor<T>& k, std::size_t per_image, double tau,
                Tensor<T>* dq, Tensor<T>* dk) {
  expect_shape(k.shape(), q.shape(), "nce_rows keys");
  const std::size_t R = q.dim(0), D = q.dim(1), S = per_image;
  if (S < 2 || R % S != 0) {
    throw ShapeError("patch_nce: need >= 2 locations per image, got " + std::to_string(S));
  }
  if (dq) expect_shape(dq->shape(), q.shape(), "nce_rows dq");
  if (dk) expect_shape(dk->shape(), k.shape(), "nce_rows dk");
  double total = 0;
  std::vector<double> z(S);
  for (std::size_t b = 0; b < R / S; ++b) {
    for (std::size_t s = 0; s < S; ++s) {
      const T* qs = q.data() + (b * S + s) * D;
      for (std::size_t j = 0; j < S; ++j) {
        const T* kj = k.data() + (b * S + j) * D;
        double d = 0;
        for (std::size_t c = 0; c < D; ++c) d += static_cast<double>(qs[c]) * kj[c];
        z[j] = d / tau;
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0;
      for (double v : z) sum += std::exp(v - mx);
      const double lse = mx + std::log(sum);
      total += lse - z[s];
      if (!dq && !dk) continue;
      for (std::size_t j = 0; j < S; ++j) {
        const double g = (std::exp(z[j] - lse) - (j == s ? 1.0 : 0.0)) / tau;
        const T* kj = k.data() + (b * S + j) * D;
        if (dq) {
          T* dqs = dq->data() + (b * S + s) * D;
          for (std::size_t c = 0; c < D; ++c) dqs[c] += static_cast<T>(g * kj[c]);
        }
        if (dk) {
          T* dkj = dk->data() + (b * S + j) * D;
          for (std::size_t c = 0; c < D; ++c) dkj[c] += static_cast<T>(g * qs[c]);
        }
      }
    }
  }
  return total;
}

void PatchNCEOptions::validate() const {
  if (locations < 2) {
    throw ShapeError("patch_nce: S_l = " + std::to_string(locations) +
                     " leaves no negatives; need at least 2 locations per layer");
  }
  if (!(tau > 0)) throw ShapeError("patch_nce: temperature must be positive");
  if (layers.empty()) throw ShapeError("patch_nce: no feature layers selected");
  for (std::size_t l : layers) {
    if (l >= kNumFeatureLayers) throw ShapeError("patch_nce: layer index out of range");
  }
}

std::vector<std::vector<std::size_t>> sample_nce_locations(
    const std::array<std::size_t, kNumFeatureLayers>& spatial_sizes, const PatchNCEOptions& opts,
    Rng& rng) {
  opts.validate();
  std::vector<std::vector<std::size_t>> out(kNumFeatureLayers);
  for (std::size_t l : opts.layers) {
    if (opts.locations > spatial_sizes[l]) {
      throw ShapeError("patch_nce: S_l = " + std::to_string(opts.locations) + " exceeds the " +
                       std::to_string(spatial_sizes[l]) + " locations of layer '" +
                       std::string(kFeatureLayerNames[l]) + "'");
    }
    auto perm = rng.permutation(spatial_sizes[l]);
    perm.resize(opts.locations);
    out[l] = std::move(perm);
  }
  return out;
}

template <typename T>
double patch_nce_loss_at(const FeatureStack<T>& input, const FeatureStack<T>& output,
                         std::vector<ProjectionHead<T>>& heads, const PatchNCEOptions& opts,
                         const std::vector<std::vector<std::size_t>>& locations,
                         PatchNCEGrads<T>* grads) {
  opts.validate();
  if (heads.size() != kNumFeatureLayers || locations.size() != kNumFeatureLayers) {
    throw ShapeError("patch_nce: need one head and one location set per feature layer");
  }
  double total = 0;
  std::size_t count = 0;
  std::vector<HeadCache<T>> qcache(kNumFeatureLayers), kcache(kNumFeatureLayers);
  std::vector<Tensor<T>> q(kNumFeatureLayers), k(kNumFeatureLayers);
  for (std::size_t l : opts.layers) {
    expect_shape(output.layers[l].shape(), input.layers[l].shape(), "patch_nce feature stacks");
    const auto& idx = locations[l];
    q[l] = heads[l].forward(gather_locations(output.layers[l], idx), grads ? &qcache[l] : nullptr);
    k[l] = heads[l].forward(gather_locations(input.layers[l], idx), grads ? &kcache[l] : nullptr);
    total += nce_rows(q[l], k[l], idx.size(), opts.tau);
    count += q[l].dim(0);
  }
  const double mean = total / static_cast<double>(count);
  if (!grads) return mean;

  const double scale = grads->scale / static_cast<double>(count);
  for (std::size_t l : opts.layers) {
    const auto& idx = locations[l];
    Tensor<T> dq = Tensor<T>::zeros_like(q[l]);
    Tensor<T> dk = Tensor<T>::zeros_like(k[l]);
    nce_rows(q[l], k[l], idx.size(), opts.tau, &dq, opts.detach_keys ? nullptr : &dk);
    dq *= static_cast<T>(scale);
    grads->output[l] = Tensor<T>::zeros_like(output.layers[l]);
    scatter_locations(heads[l].backward(qcache[l], dq), idx, grads->output[l]);
    if (!opts.detach_keys) {
      dk *= static_cast<T>(scale);
      grads->input[l] = Tensor<T>::zeros_like(input.layers[l]);
      scatter_locations(heads[l].backward(kcache[l], dk), idx, grads->input[l]);
    }
  }
  return mean;
}

template <typename T>
double patch_nce_loss(const FeatureStack<T>& input, const FeatureStack<T>& output,
                      std::vector<ProjectionHead<T>>& heads, const PatchNCEOptions& opts, Rng& rng,
                      PatchNCEGrads<T>* grads) {
  std::array<std::size_t, kNumFeatureLayers> sizes{};
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    const auto& f = output.layers[l];
    sizes[l] = f.rank() == 4 ? f.dim(2) * f.dim(3) : 0;
  }
  const auto locations = sample_nce_locations(sizes, opts, rng);
  return patch_nce_loss_at(input, output, heads, opts, locations, grads);
}

double total_generator_loss(double adv, double ide, double pc, const LossWeights& w) {
  return w.adv * adv + w.ide * ide + w.nce * pc;
}

#define UIDKAT_INSTANTIATE_LOSSES(T)                                                           \
  template double lsgan_generator_loss(const Tensor<T>&, Tensor<T>*);                          \
  template double lsgan_discriminator_loss(const Tensor<T>&, const Tensor<T>&, Tensor<T>*,    \
                                           Tensor<T>*);                                        \
  template double identity_loss(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);               \
  template double nce_rows(const Tensor<T>&, const Tensor<T>&, std::size_t, double,           \
                           Tensor<T>*, Tensor<T>*);                                            \
  template double patch_nce_loss(const FeatureStack<T>&, const FeatureStack<T>&,               \
                                 std::vector<ProjectionHead<T>>&, const PatchNCEOptions&,      \
                                 Rng&, PatchNCEGrads<T>*);                                     \
  template double patch_nce_loss_at(const FeatureStack<T>&, const FeatureStack<T>&,            \
                                    std::vector<ProjectionHead<T>>&, const PatchNCEOptions&,   \
                                    const std::vector<std::vector<std::size_t>>&,              \
                                    PatchNCEGrads<T>*);

UIDKAT_INSTANTIATE_LOSSES(float)
UIDKAT_INSTANTIATE_LOSSES(double)

}  // namespace uidkat
