#include "uidkat/kat_block.hpp"

#include <Eigen/Core>
#include <cmath>

namespace uidkat {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;

enum AttnSlot { kQ = 0, kK = 1, kV = 2, kO = 3 };
enum AttnSaved { kSavedQ = 0, kSavedK, kSavedV, kSavedProbs, kSavedContext };

std::size_t hidden_dim(const BlockConfig& cfg) { return cfg.hidden_ratio * cfg.embed_dim; }

}  // namespace

MixerKind parse_mixer(std::string_view name) {
  if (name == "grkan") return MixerKind::kGrkan;
  if (name == "mlp") return MixerKind::kMlp;
  if (name == "attention") return MixerKind::kAttention;
  if (name == "identity") return MixerKind::kIdentity;
  throw ShapeError("unknown mixer kind '" + std::string(name) + "'");
}

std::string_view mixer_name(MixerKind kind) {
  switch (kind) {
    case MixerKind::kGrkan: return "grkan";
    case MixerKind::kMlp: return "mlp";
    case MixerKind::kAttention: return "attention";
    case MixerKind::kIdentity: return "identity";
  }
  return "?";
}

std::vector<MixerKind> BlockConfig::units() const {
  if (grkan_stack == 2) return {token_mixer, channel_mixer};
  return std::vector<MixerKind>(grkan_stack, MixerKind::kGrkan);
}

void BlockConfig::validate() const {
  auto fail = [](const std::string& m) { throw ShapeError("block config: " + m); };
  if (channels == 0) fail("channels must be set");
  if (patch_size == 0) fail("patch size must be >= 1");
  if (embed_dim < 2) fail("embed_dim must be >= 2");
  if (grkan_stack < 1 || grkan_stack > 4) {
    fail("grkan_stack must be in [1, 4], got " + std::to_string(grkan_stack));
  }
  if (grkan_stack != 2 &&
      (token_mixer != MixerKind::kGrkan || channel_mixer != MixerKind::kGrkan)) {
    fail("stacks other than 2 are defined for grkan/grkan mixers only");
  }
  if (grkan_layers < 1 || grkan_layers > 2) fail("grkan_layers must be 1 or 2");
  if (hidden_ratio < 1) fail("hidden_ratio must be >= 1");
  if (unembed_kernel % 2 == 0) fail("unembed kernel must be odd");
  for (MixerKind k : units()) {
    if (k != MixerKind::kGrkan) continue;
    if (embed_dim % grkan_groups != 0) {
      fail("embed_dim " + std::to_string(embed_dim) + " not divisible by " +
           std::to_string(grkan_groups) + " GR-KAN groups");
    }
    if (grkan_layers == 2 && hidden_dim(*this) % grkan_groups != 0) {
      fail("GR-KAN hidden width not divisible by the group count");
    }
  }
}

template <typename T>
void MixerUnit<T>::collect(ParamRefs<T>& out) {
  out.push_back(&norm_gamma);
  out.push_back(&norm_beta);
  for (auto& l : grkan) l.collect(out);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
}

template <typename T>
MixerUnit<T> make_mixer(MixerKind kind, const BlockConfig& cfg, Rng& rng,
                        const std::string& prefix) {
  const std::size_t D = cfg.embed_dim;
  MixerUnit<T> u;
  u.kind = kind;
  u.norm_gamma = Param<T>(prefix + ".norm.gamma", {D});
  u.norm_gamma.value.fill(T(1));
  u.norm_beta = Param<T>(prefix + ".norm.beta", {D});
  auto add_linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    Param<T> w(prefix + "." + name + ".weight", {out, in});
    init_fan_in(w.value, in, rng);
    u.weights.push_back(std::move(w));
    u.biases.emplace_back(prefix + "." + name + ".bias", Shape{out});
  };
  switch (kind) {
    case MixerKind::kGrkan:
      if (cfg.grkan_layers == 1) {
        u.grkan.push_back(grkan_init<T>(D, D, cfg.grkan_groups, cfg.rational_init, rng,
                                        prefix + ".grkan.0", cfg.num_order, cfg.den_order));
      } else {
        const std::size_t H = hidden_dim(cfg);
        u.grkan.push_back(grkan_init<T>(D, H, cfg.grkan_groups, cfg.rational_init, rng,
                                        prefix + ".grkan.0", cfg.num_order, cfg.den_order));
        u.grkan.push_back(grkan_init<T>(H, D, cfg.grkan_groups, cfg.rational_init, rng,
                                        prefix + ".grkan.1", cfg.num_order, cfg.den_order));
      }
      break;
    case MixerKind::kMlp:
      add_linear("fc1", hidden_dim(cfg), D);
      add_linear("fc2", D, hidden_dim(cfg));
      break;
    case MixerKind::kAttention:
      add_linear("q", D, D);
      add_linear("k", D, D);
      add_linear("v", D, D);
      add_linear("o", D, D);
      break;
    case MixerKind::kIdentity: break;
  }
  return u;
}

template <typename T>
Tensor<T> mixer_forward(const Tensor<T>& tokens, const MixerUnit<T>& unit,
                        std::size_t tokens_per_sample, MixerCache<T>* cache) {
  switch (unit.kind) {
    case MixerKind::kIdentity: return tokens;
    case MixerKind::kGrkan: {
      if (cache) cache->grkan.resize(unit.grkan.size());
      Tensor<T> h = tokens;
      for (std::size_t i = 0; i < unit.grkan.size(); ++i) {
        h = grkan_forward(h, unit.grkan[i], cache ? &cache->grkan[i] : nullptr);
      }
      return h;
    }
    case MixerKind::kMlp: {
      Tensor<T> pre = linear(tokens, unit.weights[0].value, &unit.biases[0].value);
      Tensor<T> act = activation(pre, Activation::kGelu);
      Tensor<T> out = linear(act, unit.weights[1].value, &unit.biases[1].value);
      if (cache) cache->saved = {std::move(pre), std::move(act)};
      return out;
    }
    case MixerKind::kAttention: {
      const std::size_t M = tokens.dim(0), D = tokens.dim(1), N = tokens_per_sample;
      if (N == 0 || M % N != 0) throw ShapeError("attention: token count not a multiple of N");
      const std::size_t B = M / N;
      Tensor<T> q = linear(tokens, unit.weights[kQ].value, &unit.biases[kQ].value);
      Tensor<T> k = linear(tokens, unit.weights[kK].value, &unit.biases[kK].value);
      Tensor<T> v = linear(tokens, unit.weights[kV].value, &unit.biases[kV].value);
      Tensor<T> probs({B, N, N});
      Tensor<T> ctx({M, D});
      const T scale = T(1) / std::sqrt(static_cast<T>(D));
      for (std::size_t b = 0; b < B; ++b) {
        CMapRow<T> qb(q.data() + b * N * D, N, D), kb(k.data() + b * N * D, N, D),
            vb(v.data() + b * N * D, N, D);
        MapRow<T> a(probs.data() + b * N * N, N, N);
        a.noalias() = (qb * kb.transpose()) * scale;
        for (std::size_t i = 0; i < N; ++i) {
          auto row = a.row(static_cast<long>(i));
          const T mx = row.maxCoeff();
          row = (row.array() - mx).exp();
          row /= row.sum();
        }
        MapRow<T>(ctx.data() + b * N * D, N, D).noalias() = a * vb;
      }
      Tensor<T> out = linear(ctx, unit.weights[kO].value, &unit.biases[kO].value);
      if (cache) cache->saved = {std::move(q), std::move(k), std::move(v), std::move(probs), std::move(ctx)};
      return out;
    }
  }
  throw ShapeError("mixer_forward: unknown mixer kind");
}

template <typename T>
Tensor<T> mixer_unit_forward(const Tensor<T>& tokens, const MixerUnit<T>& unit,
                             std::size_t tokens_per_sample, MixerCache<T>* cache) {
  NormCache<T> norm;
  Tensor<T> normed = layer_norm(tokens, &unit.norm_gamma.value, &unit.norm_beta.value, &norm);
  Tensor<T> out = mixer_forward(normed, unit, tokens_per_sample, cache);
  if (cache) {
    cache->input = tokens;
    cache->norm = std::move(norm);
    cache->normed = std::move(normed);
  }
  return out;
}

template <typename T>
Tensor<T> mixer_unit_backward(MixerUnit<T>& unit, const MixerCache<T>& cache,
                              std::size_t tokens_per_sample, const Tensor<T>& dy) {
  Tensor<T> dnormed;
  switch (unit.kind) {
    case MixerKind::kIdentity: dnormed = dy; break;
    case MixerKind::kGrkan: {
      Tensor<T> g = dy;
      for (std::size_t i = unit.grkan.size(); i-- > 0;) g = grkan_backward(unit.grkan[i], cache.grkan[i], g);
      dnormed = std::move(g);
      break;
    }
    case MixerKind::kMlp: {
      const Tensor<T>& pre = cache.saved[0];
      const Tensor<T>& act = cache.saved[1];
      Tensor<T> dact = Tensor<T>::zeros_like(act);
      linear_backward_into(act, unit.weights[1].value, dy, &dact, &unit.weights[1].grad,
                           &unit.biases[1].grad);
      Tensor<T> dpre = activation_backward(pre, act, dact, Activation::kGelu);
      dnormed = Tensor<T>::zeros_like(cache.normed);
      linear_backward_into(cache.normed, unit.weights[0].value, dpre, &dnormed,
                           &unit.weights[0].grad, &unit.biases[0].grad);
      break;
    }
    case MixerKind::kAttention: {
      const Tensor<T>& q = cache.saved[kSavedQ];
      const Tensor<T>& k = cache.saved[kSavedK];
      const Tensor<T>& v = cache.saved[kSavedV];
      const Tensor<T>& probs = cache.saved[kSavedProbs];
      const Tensor<T>& ctx = cache.saved[kSavedContext];
      const std::size_t M = q.dim(0), D = q.dim(1), N = tokens_per_sample, B = M / N;
      const T scale = T(1) / std::sqrt(static_cast<T>(D));
      Tensor<T> dctx = Tensor<T>::zeros_like(ctx);
      linear_backward_into(ctx, unit.weights[kO].value, dy, &dctx, &unit.weights[kO].grad,
                           &unit.biases[kO].grad);
      Tensor<T> dq({M, D}), dk({M, D}), dv({M, D});
      RowMat<T> da(N, N), ds(N, N);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = b * N * D;
        CMapRow<T> qb(q.data() + off, N, D), kb(k.data() + off, N, D), vb(v.data() + off, N, D);
        CMapRow<T> a(probs.data() + b * N * N, N, N);
        CMapRow<T> dcb(dctx.data() + off, N, D);
        da.noalias() = dcb * vb.transpose();
        MapRow<T>(dv.data() + off, N, D).noalias() = a.transpose() * dcb;
        for (long i = 0; i < static_cast<long>(N); ++i) {
          const T dot = (da.row(i).array() * a.row(i).array()).sum();
          ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
        }
        MapRow<T>(dq.data() + off, N, D).noalias() = (ds * kb) * scale;
        MapRow<T>(dk.data() + off, N, D).noalias() = (ds.transpose() * qb) * scale;
      }
      dnormed = Tensor<T>::zeros_like(cache.normed);
      linear_backward_into(cache.normed, unit.weights[kQ].value, dq, &dnormed,
                           &unit.weights[kQ].grad, &unit.biases[kQ].grad);
      linear_backward_into(cache.normed, unit.weights[kK].value, dk, &dnormed,
                           &unit.weights[kK].grad, &unit.biases[kK].grad);
      linear_backward_into(cache.normed, unit.weights[kV].value, dv, &dnormed,
                           &unit.weights[kV].grad, &unit.biases[kV].grad);
      break;
    }
  }
  Tensor<T> dx = Tensor<T>::zeros_like(cache.input);
  layer_norm_backward(cache.input, cache.norm, &unit.norm_gamma.value, dnormed, dx,
                      &unit.norm_gamma.grad, &unit.norm_beta.grad);
  return dx;
}

// ---------------------------------------------------------------- block

template <typename T>
void KatBlock<T>::collect(ParamRefs<T>& out) {
  out.push_back(&embed_weight);
  out.push_back(&embed_bias);
  for (auto& u : units) u.collect(out);
  out.push_back(&unembed_weight);
  out.push_back(&unembed_bias);
}

template <typename T>
ParamRefs<T> KatBlock<T>::params() {
  ParamRefs<T> out;
  collect(out);
  return out;
}

template <typename T>
KatBlock<T> make_kat_block(const BlockConfig& cfg, Rng& rng, const std::string& prefix) {
  cfg.validate();
  const std::size_t C = cfg.channels, P = cfg.patch_size, D = cfg.embed_dim;
  const std::size_t k = cfg.unembed_kernel;
  KatBlock<T> blk;
  blk.cfg = cfg;
  blk.embed_weight = Param<T>(prefix + ".embed.weight", {D, C, P, P});
  init_fan_in(blk.embed_weight.value, C * P * P, rng);
  blk.embed_bias = Param<T>(prefix + ".embed.bias", {D});
  const auto kinds = cfg.units();
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    blk.units.push_back(make_mixer<T>(kinds[i], cfg, rng, prefix + ".units." + std::to_string(i)));
  }
  blk.unembed_weight = Param<T>(prefix + ".unembed.weight", {C * P * P, D, k, k});
  init_fan_in(blk.unembed_weight.value, D * k * k, rng);
  blk.unembed_bias = Param<T>(prefix + ".unembed.bias", {C * P * P});
  return blk;
}

namespace {

void check_block_input(const BlockConfig& cfg, const Shape& s) {
  if (s.size() != 4 || s[1] != cfg.channels) {
    throw ShapeError("kat block: expected (B, " + std::to_string(cfg.channels) +
                     ", H, W) input, got " + shape_str(s));
  }
  if (s[2] % cfg.patch_size != 0 || s[3] % cfg.patch_size != 0) {
    throw ShapeError("kat block: spatial size " + shape_str(s) + " not divisible by patch size " +
                     std::to_string(cfg.patch_size));
  }
}

}  // namespace

template <typename T>
Tensor<T> KatBlock<T>::forward(const Tensor<T>& feat, KatBlockCache<T>* cache) const {
  check_block_input(cfg, feat.shape());
  const std::size_t P = cfg.patch_size;
  const std::size_t B = feat.dim(0), gh = feat.dim(2) / P, gw = feat.dim(3) / P;
  const std::size_t N = gh * gw;
  Tensor<T> grid = conv2d(feat, embed_weight.value, &embed_bias.value, Conv2dSpec{P, 0});
  Tensor<T> t = nchw_to_tokens(grid);
  if (cache) {
    cache->input = feat;
    cache->embedded_grid = grid;
    cache->units.assign(units.size(), MixerCache<T>{});
    cache->batch = B;
    cache->grid_h = gh;
    cache->grid_w = gw;
  }
  for (std::size_t i = 0; i < units.size(); ++i) {
    t += mixer_unit_forward(t, units[i], N, cache ? &cache->units[i] : nullptr);
  }
  Tensor<T> tg = tokens_to_nchw(t, B, gh, gw);
  const std::size_t k = cfg.unembed_kernel;
  Tensor<T> u = conv2d(tg, unembed_weight.value, &unembed_bias.value, Conv2dSpec{1, (k - 1) / 2});
  if (cache) cache->token_grid = std::move(tg);
  return pixel_shuffle(u, P);
}

template <typename T>
Tensor<T> KatBlock<T>::backward(const KatBlockCache<T>& cache, const Tensor<T>& dy) {
  const std::size_t P = cfg.patch_size, k = cfg.unembed_kernel;
  expect_shape(dy.shape(), cache.input.shape(), "kat block backward");
  Tensor<T> du = pixel_unshuffle(dy, P);
  Tensor<T> dtg = Tensor<T>::zeros_like(cache.token_grid);
  conv2d_backward_into(cache.token_grid, unembed_weight.value, du, Conv2dSpec{1, (k - 1) / 2},
                       &dtg, &unembed_weight.grad, &unembed_bias.grad);
  Tensor<T> dt = nchw_to_tokens(dtg);
  const std::size_t N = cache.grid_h * cache.grid_w;
  for (std::size_t i = units.size(); i-- > 0;) {
    dt += mixer_unit_backward(units[i], cache.units[i], N, dt);
  }
  Tensor<T> dgrid = tokens_to_nchw(dt, cache.batch, cache.grid_h, cache.grid_w);
  Tensor<T> dx = Tensor<T>::zeros_like(cache.input);
  conv2d_backward_into(cache.input, embed_weight.value, dgrid, Conv2dSpec{P, 0}, &dx,
                       &embed_weight.grad, &embed_bias.grad);
  return dx;
}

template <typename T>
std::uint64_t KatBlock<T>::macs(std::size_t batch, std::size_t h, std::size_t w) const {
  const std::uint64_t C = cfg.channels, P = cfg.patch_size, D = cfg.embed_dim;
  const std::uint64_t k = cfg.unembed_kernel;
  const std::uint64_t M = batch * (h / P) * (w / P);
  std::uint64_t total = M * D * C * P * P;   // embed
  total += M * (C * P * P) * D * k * k;      // unembed
  const std::uint64_t rmacs = rational_macs(cfg.num_order, cfg.den_order);
  for (const auto& u : units) {
    switch (u.kind) {
      case MixerKind::kGrkan:
        for (const auto& l : u.grkan) total += M * (l.d_in * l.d_out + l.d_in * rmacs);
        break;
      case MixerKind::kMlp: total += M * 2 * D * hidden_dim(cfg); break;
      case MixerKind::kAttention: {
        const std::uint64_t N = (h / P) * (w / P);
        total += M * 4 * D * D + batch * 2 * N * N * D;
        break;
      }
      case MixerKind::kIdentity: break;
    }
  }
  return total;
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& feat, const KatBlock<T>& block) {
  check_block_input(block.cfg, feat.shape());
  const std::size_t P = block.cfg.patch_size;
  Tensor<T> grid =
      conv2d(feat, block.embed_weight.value, &block.embed_bias.value, Conv2dSpec{P, 0});
  const std::size_t B = feat.dim(0), N = grid.dim(2) * grid.dim(3), D = grid.dim(1);
  return nchw_to_tokens(grid).reshaped({B, N, D});
}

template <typename T>
Tensor<T> patch_unembed(const Tensor<T>& tokens, const KatBlock<T>& block, std::size_t h,
                        std::size_t w) {
  const std::size_t P = block.cfg.patch_size, k = block.cfg.unembed_kernel;
  if (tokens.rank() != 3 || tokens.dim(2) != block.cfg.embed_dim) {
    throw ShapeError("patch_unembed: expected (B, N, D) tokens, got " + shape_str(tokens.shape()));
  }
  if (h % P != 0 || w % P != 0 || tokens.dim(1) != (h / P) * (w / P)) {
    throw ShapeError("patch_unembed: " + std::to_string(tokens.dim(1)) +
                     " tokens do not tile a " + std::to_string(h) + "x" + std::to_string(w) +
                     " map with patch " + std::to_string(P));
  }
  const std::size_t B = tokens.dim(0);
  Tensor<T> flat = tokens.reshaped({B * tokens.dim(1), tokens.dim(2)});
  Tensor<T> grid = tokens_to_nchw(flat, B, h / P, w / P);
  Tensor<T> u = conv2d(grid, block.unembed_weight.value, &block.unembed_bias.value,
                       Conv2dSpec{1, (k - 1) / 2});
  return pixel_shuffle(u, P);
}

template <typename T>
Tensor<T> dual_grkan_forward(const Tensor<T>& feat, const KatBlock<T>& block) {
  if (block.cfg.grkan_stack != 2 || block.cfg.token_mixer != MixerKind::kGrkan ||
      block.cfg.channel_mixer != MixerKind::kGrkan) {
    throw ShapeError("dual_grkan_forward: block is not configured as grkan/grkan with 2 units");
  }
  return block.forward(feat);
}

template <typename T>
Tensor<T> n_grkan_forward(const Tensor<T>& feat, const KatBlock<T>& block) {
  const auto& cfg = block.cfg;
  if (cfg.grkan_stack < 1 || cfg.grkan_stack > 4 || cfg.token_mixer != MixerKind::kGrkan ||
      cfg.channel_mixer != MixerKind::kGrkan) {
    throw ShapeError("n_grkan_forward: need 1 <= n <= 4 GR-KAN units");
  }
  return block.forward(feat);
}

#define UIDKAT_INSTANTIATE_KAT(T)                                                              \
  template struct MixerUnit<T>;                                                                \
  template struct KatBlock<T>;                                                                 \
  template MixerUnit<T> make_mixer(MixerKind, const BlockConfig&, Rng&, const std::string&);  \
  template Tensor<T> mixer_forward(const Tensor<T>&, const MixerUnit<T>&, std::size_t,        \
                                   MixerCache<T>*);                                            \
  template Tensor<T> mixer_unit_forward(const Tensor<T>&, const MixerUnit<T>&, std::size_t,   \
                                        MixerCache<T>*);                                       \
  template Tensor<T> mixer_unit_backward(MixerUnit<T>&, const MixerCache<T>&, std::size_t,    \
                                         const Tensor<T>&);                                    \
  template KatBlock<T> make_kat_block(const BlockConfig&, Rng&, const std::string&);          \
  template Tensor<T> patch_embed(const Tensor<T>&, const KatBlock<T>&);                        \
  template Tensor<T> patch_unembed(const Tensor<T>&, const KatBlock<T>&, std::size_t,         \
                                   std::size_t);                                               \
  template Tensor<T> dual_grkan_forward(const Tensor<T>&, const KatBlock<T>&);                 \
  template Tensor<T> n_grkan_forward(const Tensor<T>&, const KatBlock<T>&);

UIDKAT_INSTANTIATE_KAT(float)
UIDKAT_INSTANTIATE_KAT(double)

}  // namespace uidkat
