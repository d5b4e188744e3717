#pragma once

// Dual-GR-KAN transformer block: patch embedding (P x P conv, stride P),
// a stack of (layer norm -> mixer -> residual) units over tokens, and patch
// unembedding (conv D -> C*P*P followed by pixel shuffle). Maps (B,C,H,W)
// back to (B,C,H,W).

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "uidkat/grkan.hpp"
#include "uidkat/ops.hpp"
#include "uidkat/param.hpp"

namespace uidkat {

enum class MixerKind { kGrkan, kMlp, kAttention, kIdentity };

MixerKind parse_mixer(std::string_view name);
std::string_view mixer_name(MixerKind kind);

struct BlockConfig {
  std::size_t channels = 0;  // C of the surrounding feature map
  std::size_t patch_size = 4;
  std::size_t embed_dim = 256;
  MixerKind token_mixer = MixerKind::kGrkan;
  MixerKind channel_mixer = MixerKind::kGrkan;
  /// Number of GR-KAN units; 2 with grkan/grkan mixers is the Dual block.
  std::size_t grkan_stack = 2;
  std::size_t grkan_groups = kDefaultGroups;
  /// 1: single GR-KAN layer D -> D. 2: D -> hidden_ratio*D -> D.
  std::size_t grkan_layers = 1;
  std::size_t hidden_ratio = 4;
  std::size_t num_order = kDefaultNumOrder;
  std::size_t den_order = kDefaultDenOrder;
  RationalInit rational_init = RationalInit::kFitSilu;
  std::size_t unembed_kernel = 1;

  /// Mixer kinds of the units in forward order.
  std::vector<MixerKind> units() const;
  /// Throws ShapeError on inconsistent settings.
  void validate() const;
};

/// One (layer norm -> mixer) unit; the residual is added by the block.
template <typename T>
struct MixerUnit {
  MixerKind kind = MixerKind::kIdentity;
  Param<T> norm_gamma, norm_beta;
  std::vector<GRKANLayer<T>> grkan;
  // mlp: fc1 (hD, D), fc2 (D, hD). attention: q, k, v, o each (D, D).
  std::vector<Param<T>> weights;
  std::vector<Param<T>> biases;

  void collect(ParamRefs<T>& out);
};

template <typename T>
struct MixerCache {
  Tensor<T> input;
  NormCache<T> norm;
  Tensor<T> normed;
  std::vector<GRKANCache<T>> grkan;
  std::vector<Tensor<T>> saved;  // mlp: pre-act, act; attention: q, k, v, probs, context
};

template <typename T>
MixerUnit<T> make_mixer(MixerKind kind, const BlockConfig& cfg, Rng& rng,
                        const std::string& prefix);

/// Mixer output for tokens (batch * tokens_per_sample, D), excluding the norm
/// and residual. Attention mixes only within each sample's tokens.
template <typename T>
Tensor<T> mixer_forward(const Tensor<T>& tokens, const MixerUnit<T>& unit,
                        std::size_t tokens_per_sample, MixerCache<T>* cache = nullptr);

/// Full unit forward (norm + mixer), caching for backward.
template <typename T>
Tensor<T> mixer_unit_forward(const Tensor<T>& tokens, const MixerUnit<T>& unit,
                             std::size_t tokens_per_sample, MixerCache<T>* cache);

/// Backward of mixer_unit_forward; returns d(tokens) excluding the residual path.
template <typename T>
Tensor<T> mixer_unit_backward(MixerUnit<T>& unit, const MixerCache<T>& cache,
                              std::size_t tokens_per_sample, const Tensor<T>& dy);

template <typename T>
struct KatBlockCache {
  Tensor<T> input;
  Tensor<T> embedded_grid;
  std::vector<MixerCache<T>> units;
  Tensor<T> token_grid;
  std::size_t batch = 0, grid_h = 0, grid_w = 0;
};

template <typename T>
struct KatBlock {
  BlockConfig cfg;
  Param<T> embed_weight, embed_bias;  // (D, C, P, P), (D)
  std::vector<MixerUnit<T>> units;
  Param<T> unembed_weight, unembed_bias;  // (C*P*P, D, k, k), (C*P*P)

  void collect(ParamRefs<T>& out);
  ParamRefs<T> params();

  Tensor<T> forward(const Tensor<T>& feat, KatBlockCache<T>* cache = nullptr) const;
  /// Returns d(feat); accumulates parameter gradients.
  Tensor<T> backward(const KatBlockCache<T>& cache, const Tensor<T>& dy);

  /// Multiply-accumulates for one forward pass at the given input size.
  std::uint64_t macs(std::size_t batch, std::size_t h, std::size_t w) const;
};

template <typename T>
KatBlock<T> make_kat_block(const BlockConfig& cfg, Rng& rng, const std::string& prefix = "block");

/// Patch embedding to (B, N, D) tokens, N = (H/P)*(W/P), row-major over the patch grid.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& feat, const KatBlock<T>& block);

/// Inverse of patch_embed's layout: (B, N, D) tokens back to (B, C, H, W).
template <typename T>
Tensor<T> patch_unembed(const Tensor<T>& tokens, const KatBlock<T>& block, std::size_t h,
                        std::size_t w);

/// The Dual-GR-KAN block; requires grkan/grkan mixers and a stack of 2.
template <typename T>
Tensor<T> dual_grkan_forward(const Tensor<T>& feat, const KatBlock<T>& block);

/// n sequential GR-KAN units between embed and unembed, 1 <= n <= 4.
template <typename T>
Tensor<T> n_grkan_forward(const Tensor<T>& feat, const KatBlock<T>& block);

}  // namespace uidkat
