#pragma once

// Least-squares adversarial losses, the L1 identity loss, PatchNCE and the
// weighted generator objective. Scalar losses return their value and, when a
// gradient pointer is given, write d(loss)/d(input) into it.

#include <span>
#include <vector>

#include "uidkat/networks.hpp"

namespace uidkat {

inline constexpr double kDefaultTau = 0.07;
inline constexpr std::size_t kDefaultNceLocations = 64;

struct LossWeights {
  double adv = 1.0;   // lambda_1
  double ide = 1.0;   // lambda_2
  double nce = 5.0;   // lambda_3

  void validate() const;
};

/// mean((fake - 1)^2).
template <typename T>
double lsgan_generator_loss(const Tensor<T>& fake, Tensor<T>* dfake = nullptr);

/// mean((real - 1)^2) + mean(fake^2).
template <typename T>
double lsgan_discriminator_loss(const Tensor<T>& real, const Tensor<T>& fake,
                                Tensor<T>* dreal = nullptr, Tensor<T>* dfake = nullptr);

/// mean(|gen - clean|); the subgradient at equality is 0.
template <typename T>
double identity_loss(const Tensor<T>& gen, const Tensor<T>& clean, Tensor<T>* dgen = nullptr);

/// -log softmax over cosine similarities / tau, target = the positive.
/// Throws NumericError on a zero-norm vector.
double patch_nce_single(std::span<const double> anchor, std::span<const double> positive,
                        const std::vector<std::span<const double>>& negatives,
                        double tau = kDefaultTau);

/// Sum over rows s of the (S)-way cross-entropy of q_s against keys k_j,
/// logits q_s . k_j / tau, target j = s. Rows are grouped per image in blocks
/// of `per_image`; negatives never cross images. q and k must be unit rows.
/// Gradients of the sum are accumulated into dq / dk when given.
template <typename T>
double nce_rows(const Tensor<T>& q, const Tensor<T>& k, std::size_t per_image, double tau,
                Tensor<T>* dq = nullptr, Tensor<T>* dk = nullptr);

struct PatchNCEOptions {
  std::size_t locations = kDefaultNceLocations;  // S_l
  double tau = kDefaultTau;
  /// Feature layers taking part, indices into the stack.
  std::vector<std::size_t> layers = {0, 1, 2, 3, 4};
  /// Keys (input-image embeddings) are constants, as in the reference
  /// contrastive-translation recipe.
  bool detach_keys = true;

  void validate() const;
};

template <typename T>
struct PatchNCEGrads {
  FeatureGrads<T> output;  // w.r.t. the re-encoded G(x) stack
  FeatureGrads<T> input;   // w.r.t. the x stack; empty when keys are detached
  double scale = 1.0;      // multiplies every gradient written, head parameters included
};

/// Sampled locations per layer, drawn without replacement.
std::vector<std::vector<std::size_t>> sample_nce_locations(
    const std::array<std::size_t, kNumFeatureLayers>& spatial_sizes, const PatchNCEOptions& opts,
    Rng& rng);

/// Mean PatchNCE over all (layer, image, location) triples. Anchors come from
/// `output` (features of G(x)), positives and negatives from `input` (x).
/// With `grads`, accumulates head parameter gradients and fills the stack
/// gradients.
template <typename T>
double patch_nce_loss(const FeatureStack<T>& input, const FeatureStack<T>& output,
                      std::vector<ProjectionHead<T>>& heads, const PatchNCEOptions& opts, Rng& rng,
                      PatchNCEGrads<T>* grads = nullptr);

/// Same loss at explicit locations (one set per stack layer; unused layers may be empty).
template <typename T>
double patch_nce_loss_at(const FeatureStack<T>& input, const FeatureStack<T>& output,
                         std::vector<ProjectionHead<T>>& heads, const PatchNCEOptions& opts,
                         const std::vector<std::vector<std::size_t>>& locations,
                         PatchNCEGrads<T>* grads = nullptr);

/// lambda_1 * adv + lambda_2 * ide + lambda_3 * pc.
double total_generator_loss(double adv, double ide, double pc, const LossWeights& w = {});

}  // namespace uidkat
