#pragma once

// Generator (SCConv encoder -> KAT blocks -> SCConv decoder with skips),
// PatchGAN discriminator and contrastive projection heads.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "uidkat/kat_block.hpp"
#include "uidkat/ops.hpp"
#include "uidkat/param.hpp"

namespace uidkat {

// ---------------------------------------------------------------- conv layer

template <typename T>
struct ConvLayer {
  Param<T> weight;  // (Cout, Cin, k, k)
  Param<T> bias;    // (Cout)
  Conv2dSpec spec;

  ConvLayer() = default;
  ConvLayer(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
            Conv2dSpec s, Rng& rng);

  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t kernel() const { return weight.value.dim(2); }

  Tensor<T> forward(const Tensor<T>& x) const;
  /// Accumulates parameter gradients (when `params` is set) and returns d(x).
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool params = true);
  void collect(ParamRefs<T>& out);
  std::uint64_t macs(std::size_t batch, std::size_t h_out, std::size_t w_out) const;
};

// ---------------------------------------------------------------- SCConv

inline constexpr std::size_t kScconvRate = 4;

/// Self-calibrated convolution over (B, C, H, W), C even. The first channel
/// half passes a plain 3x3 conv; the second is gated by
/// sigmoid(B + up(conv(avgpool_r(B)))) applied to conv(B), then convolved.
template <typename T>
struct SCConv {
  ConvLayer<T> k1;  // plain branch
  ConvLayer<T> k2;  // pooled calibration
  ConvLayer<T> k3;  // gated features
  ConvLayer<T> k4;  // output of the calibrated branch
  std::size_t rate = kScconvRate;

  void collect(ParamRefs<T>& out);
  std::uint64_t macs(std::size_t batch, std::size_t h, std::size_t w) const;
};

template <typename T>
struct SCConvCache {
  Tensor<T> a, b, pooled, gate, k3_out, calibrated;
};

template <typename T>
SCConv<T> make_scconv(const std::string& prefix, std::size_t channels, Rng& rng,
                      std::size_t rate = kScconvRate);

template <typename T>
Tensor<T> scconv_forward(const Tensor<T>& feat, const SCConv<T>& sc,
                         SCConvCache<T>* cache = nullptr);

template <typename T>
Tensor<T> scconv_backward(SCConv<T>& sc, const SCConvCache<T>& cache, const Tensor<T>& dy);

// ---------------------------------------------------------------- generator

enum class SkipMode { kAdd, kConcat };

SkipMode parse_skip_mode(std::string_view name);
std::string_view skip_mode_name(SkipMode mode);

/// Contrastive layer tags in forward order.
inline constexpr std::size_t kNumFeatureLayers = 5;
inline constexpr std::array<std::string_view, kNumFeatureLayers> kFeatureLayerNames = {
    "stem", "down1", "down2", "block_mid", "block_last"};

struct GeneratorConfig {
  char variant = 'T';
  std::size_t ngf = 16;
  std::size_t n_blocks = 9;
  BlockConfig block;  // channels filled in from ngf
  Activation encoder_activation = Activation::kSilu;
  SkipMode skip_mode = SkipMode::kAdd;
  std::size_t scconv_rate = kScconvRate;

  std::size_t latent_channels() const { return 4 * ngf; }
  /// Channel count of each contrastive layer.
  std::array<std::size_t, kNumFeatureLayers> feature_channels() const;
  /// Index of the block whose output is the "block_mid" layer, 1-based.
  std::size_t mid_block() const { return (n_blocks + 1) / 2; }
  void validate() const;
};

/// Table presets T (16, 9), S (32, 9), B (64, 5), all with patch size 4.
GeneratorConfig variant_config(char tag);

/// Features captured during an encoder pass, one per layer tag.
template <typename T>
struct FeatureStack {
  std::array<Tensor<T>, kNumFeatureLayers> layers;
};

/// Gradients injected at the contrastive layers; empty tensors are skipped.
template <typename T>
using FeatureGrads = std::array<Tensor<T>, kNumFeatureLayers>;

template <typename T>
struct StageCache {
  Tensor<T> input;   // conv input (after upsampling for up stages)
  Tensor<T> conv_out;
  NormCache<T> norm;
  Tensor<T> normed;
  Tensor<T> act_out;
  SCConvCache<T> sc;
};

/// conv -> instance norm -> activation -> SCConv; up stages upsample first.
template <typename T>
struct Stage {
  ConvLayer<T> conv;
  SCConv<T> sc;
  Activation act = Activation::kSilu;
  bool upsample = false;

  Tensor<T> forward(const Tensor<T>& x, StageCache<T>* cache) const;
  Tensor<T> backward(const StageCache<T>& cache, const Tensor<T>& dy);
  void collect(ParamRefs<T>& out);
  std::uint64_t macs(std::size_t batch, std::size_t h_in, std::size_t w_in) const;
};

template <typename T>
struct EncodeCache {
  StageCache<T> stem, down1, down2;
  std::vector<KatBlockCache<T>> blocks;
};

template <typename T>
struct DecodeCache {
  StageCache<T> up1, up2;
  Tensor<T> head_in;
  Tensor<T> out;  // tanh output
};

template <typename T>
struct GeneratorCache {
  EncodeCache<T> enc;
  DecodeCache<T> dec;
};

template <typename T>
struct Generator {
  GeneratorConfig cfg;
  Stage<T> stem, down1, down2;
  std::vector<KatBlock<T>> blocks;
  Stage<T> up1, up2;
  ConvLayer<T> head;

  /// Encoder and transformation stage. Returns the transformed latent; skips
  /// are the stem and down1 outputs, stored in the stack and the cache.
  Tensor<T> encode(const Tensor<T>& img, FeatureStack<T>& stack,
                   EncodeCache<T>* cache = nullptr) const;
  Tensor<T> decode(const Tensor<T>& latent, const Tensor<T>& skip0, const Tensor<T>& skip1,
                   DecodeCache<T>* cache = nullptr) const;
  /// Full forward. `stack` may be null when features are not needed.
  Tensor<T> forward(const Tensor<T>& img, FeatureStack<T>* stack = nullptr,
                    GeneratorCache<T>* cache = nullptr) const;

  /// Backward of encode: `dlatent` is the gradient of the transformed latent
  /// excluding feature injections; returns d(img).
  Tensor<T> encode_backward(const EncodeCache<T>& cache, Tensor<T> dlatent, Tensor<T> dskip0,
                            Tensor<T> dskip1, const FeatureGrads<T>* dfeat);
  /// Backward of the full forward with optional feature-gradient injection.
  Tensor<T> backward(const GeneratorCache<T>& cache, const Tensor<T>& dout,
                     const FeatureGrads<T>* dfeat = nullptr);

  void collect(ParamRefs<T>& out);
  ParamRefs<T> params();
  std::uint64_t macs(std::size_t batch, std::size_t h, std::size_t w) const;
};

template <typename T>
Generator<T> make_generator(const GeneratorConfig& cfg, Rng& rng);

/// Throws ShapeError unless the input is (B, 3, H, W) with H, W divisible by 16.
void check_generator_input(const Shape& s);

// ---------------------------------------------------------------- discriminator

template <typename T>
struct DiscriminatorCache {
  std::vector<Tensor<T>> conv_in;
  std::vector<Tensor<T>> conv_out;
  std::vector<NormCache<T>> norm;
  std::vector<Tensor<T>> pre_act;
};

/// 70x70 PatchGAN: 4x4 convs 3->64->128->256 (stride 2), 256->512 and
/// 512->1 (stride 1), padding 1, lrelu 0.2, instance norm from layer 2 to 4.
template <typename T>
struct Discriminator {
  std::vector<ConvLayer<T>> convs;

  Tensor<T> forward(const Tensor<T>& img, DiscriminatorCache<T>* cache = nullptr) const;
  /// Returns d(img); parameter gradients accumulate only when `params` is set.
  Tensor<T> backward(const DiscriminatorCache<T>& cache, const Tensor<T>& dy, bool params);

  void collect(ParamRefs<T>& out);
  ParamRefs<T> params();
  std::uint64_t macs(std::size_t batch, std::size_t h, std::size_t w) const;
};

template <typename T>
Discriminator<T> make_discriminator(Rng& rng, std::size_t ndf = 64);

/// Smallest square input yielding a non-empty logit map with every
/// normalised activation larger than 1x1.
inline constexpr std::size_t kMinDiscriminatorInput = 24;

std::size_t discriminator_output_size(std::size_t in);

// ---------------------------------------------------------------- projection heads

inline constexpr std::size_t kProjectionDim = 256;

template <typename T>
struct HeadCache {
  Tensor<T> input, hidden_pre, hidden, out_pre;
  std::vector<T> norms;
};

/// Two-layer MLP (C -> 256 -> 256, relu between) followed by l2 normalisation.
template <typename T>
struct ProjectionHead {
  Param<T> w1, b1, w2, b2;

  Tensor<T> forward(const Tensor<T>& rows, HeadCache<T>* cache = nullptr) const;
  Tensor<T> backward(const HeadCache<T>& cache, const Tensor<T>& dy);
  void collect(ParamRefs<T>& out);
  std::uint64_t macs(std::size_t rows) const;
};

template <typename T>
ProjectionHead<T> make_projection_head(const std::string& prefix, std::size_t channels, Rng& rng,
                                       std::size_t dim = kProjectionDim);

/// Rows of `feat` (B, C, H, W) at flat spatial indices, per sample:
/// output row b * S + s holds feat[b, :, idx[s]].
template <typename T>
Tensor<T> gather_locations(const Tensor<T>& feat, const std::vector<std::size_t>& idx);

/// Adjoint of gather_locations, accumulated into dfeat.
template <typename T>
void scatter_locations(const Tensor<T>& drows, const std::vector<std::size_t>& idx,
                       Tensor<T>& dfeat);

/// Embeds sampled locations of every stack layer with its head.
template <typename T>
std::vector<Tensor<T>> projection_head_forward(const FeatureStack<T>& stack,
                                               const std::vector<ProjectionHead<T>>& heads,
                                               const std::vector<std::vector<std::size_t>>& idx);

// ---------------------------------------------------------------- variants

template <typename T>
struct Model {
  Generator<T> gen;
  Discriminator<T> disc;
  std::vector<ProjectionHead<T>> heads;  // one per feature layer

  ParamRefs<T> generator_side_params();  // generator and heads
};

template <typename T>
Model<T> build_model(const GeneratorConfig& cfg, Rng& rng);

/// Tag 'T', 'S' or 'B' (case-insensitive); throws ShapeError otherwise.
template <typename T>
Model<T> build_variant(char tag, Rng& rng);

}  // namespace uidkat
