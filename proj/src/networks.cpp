#include "uidkat/networks.hpp"

#include <cctype>
#include <cmath>

namespace uidkat {

// ---------------------------------------------------------------- conv layer

template <typename T>
ConvLayer<T>::ConvLayer(const std::string& prefix, std::size_t cin, std::size_t cout,
                        std::size_t k, Conv2dSpec s, Rng& rng)
    : weight(prefix + ".weight", {cout, cin, k, k}), bias(prefix + ".bias", {cout}), spec(s) {
  init_fan_in(weight.value, cin * k * k, rng);
}

template <typename T>
Tensor<T> ConvLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight.value, &bias.value, spec);
}

template <typename T>
Tensor<T> ConvLayer<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, bool params) {
  Tensor<T> dx = Tensor<T>::zeros_like(x);
  conv2d_backward_into(x, weight.value, dy, spec, &dx, params ? &weight.grad : nullptr,
                       params ? &bias.grad : nullptr);
  return dx;
}

template <typename T>
void ConvLayer<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
std::uint64_t ConvLayer<T>::macs(std::size_t batch, std::size_t h_out, std::size_t w_out) const {
  return std::uint64_t{batch} * h_out * w_out * out_channels() * in_channels() * kernel() *
         kernel();
}

// ---------------------------------------------------------------- SCConv

template <typename T>
void SCConv<T>::collect(ParamRefs<T>& out) {
  k1.collect(out);
  k2.collect(out);
  k3.collect(out);
  k4.collect(out);
}

template <typename T>
std::uint64_t SCConv<T>::macs(std::size_t batch, std::size_t h, std::size_t w) const {
  return k1.macs(batch, h, w) + k2.macs(batch, h / rate, w / rate) + k3.macs(batch, h, w) +
         k4.macs(batch, h, w);
}

template <typename T>
SCConv<T> make_scconv(const std::string& prefix, std::size_t channels, Rng& rng,
                      std::size_t rate) {
  if (channels % 2 != 0) {
    throw ShapeError("scconv: channel count " + std::to_string(channels) + " is odd");
  }
  const std::size_t h = channels / 2;
  const Conv2dSpec same{1, 1};
  SCConv<T> sc;
  sc.k1 = ConvLayer<T>(prefix + ".k1", h, h, 3, same, rng);
  sc.k2 = ConvLayer<T>(prefix + ".k2", h, h, 3, same, rng);
  sc.k3 = ConvLayer<T>(prefix + ".k3", h, h, 3, same, rng);
  sc.k4 = ConvLayer<T>(prefix + ".k4", h, h, 3, same, rng);
  sc.rate = rate;
  return sc;
}

template <typename T>
Tensor<T> scconv_forward(const Tensor<T>& feat, const SCConv<T>& sc, SCConvCache<T>* cache) {
  if (feat.rank() != 4 || feat.dim(1) % 2 != 0) {
    throw ShapeError("scconv: expected (B, C, H, W) with even C, got " + shape_str(feat.shape()));
  }
  if (feat.dim(2) < sc.rate || feat.dim(3) < sc.rate) {
    throw ShapeError("scconv: spatial size " + shape_str(feat.shape()) +
                     " smaller than the pooling rate " + std::to_string(sc.rate));
  }
  const std::size_t h = feat.dim(1) / 2;
  Tensor<T> a = channel_slice(feat, 0, h);
  Tensor<T> b = channel_slice(feat, h, h);
  Tensor<T> pooled = avg_pool(b, sc.rate);
  Tensor<T> s = upsample_nearest(sc.k2.forward(pooled), sc.rate);
  s += b;
  Tensor<T> gate = activation(s, Activation::kSigmoid);
  Tensor<T> k3_out = sc.k3.forward(b);
  Tensor<T> calibrated = k3_out;
  for (std::size_t i = 0; i < calibrated.numel(); ++i) calibrated[i] *= gate[i];
  Tensor<T> out = channel_concat(sc.k1.forward(a), sc.k4.forward(calibrated));
  if (cache) {
    cache->a = std::move(a);
    cache->b = std::move(b);
    cache->pooled = std::move(pooled);
    cache->gate = std::move(gate);
    cache->k3_out = std::move(k3_out);
    cache->calibrated = std::move(calibrated);
  }
  return out;
}

template <typename T>
Tensor<T> scconv_backward(SCConv<T>& sc, const SCConvCache<T>& cache, const Tensor<T>& dy) {
  const std::size_t h = cache.a.dim(1);
  Tensor<T> da = sc.k1.backward(cache.a, channel_slice(dy, 0, h));
  Tensor<T> dcal = sc.k4.backward(cache.calibrated, channel_slice(dy, h, h));
  Tensor<T> dk3 = dcal;
  Tensor<T> ds = dcal;
  for (std::size_t i = 0; i < dcal.numel(); ++i) {
    const T g = cache.gate[i];
    dk3[i] = dcal[i] * g;
    ds[i] = dcal[i] * cache.k3_out[i] * g * (T(1) - g);
  }
  Tensor<T> db = sc.k3.backward(cache.b, dk3);
  db += ds;
  Tensor<T> dpooled = sc.k2.backward(cache.pooled, upsample_nearest_backward(ds, sc.rate));
  db += avg_pool_backward(dpooled, sc.rate);
  return channel_concat(da, db);
}

// ---------------------------------------------------------------- config

SkipMode parse_skip_mode(std::string_view name) {
  if (name == "add") return SkipMode::kAdd;
  if (name == "concat") return SkipMode::kConcat;
  throw ShapeError("unknown skip mode '" + std::string(name) + "'");
}

std::string_view skip_mode_name(SkipMode mode) {
  return mode == SkipMode::kAdd ? "add" : "concat";
}

std::array<std::size_t, kNumFeatureLayers> GeneratorConfig::feature_channels() const {
  return {ngf, 2 * ngf, 4 * ngf, 4 * ngf, 4 * ngf};
}

void GeneratorConfig::validate() const {
  if (ngf == 0 || ngf % 2 != 0) throw ShapeError("generator: ngf must be even and positive");
  if (n_blocks == 0) throw ShapeError("generator: need at least one block");
  if (block.channels != latent_channels()) {
    throw ShapeError("generator: block channels " + std::to_string(block.channels) +
                     " differ from the latent width " + std::to_string(latent_channels()));
  }
  if (scconv_rate == 0) throw ShapeError("generator: scconv rate must be positive");
  block.validate();
}

GeneratorConfig variant_config(char tag) {
  GeneratorConfig cfg;
  switch (std::toupper(static_cast<unsigned char>(tag))) {
    case 'T': cfg.ngf = 16; cfg.n_blocks = 9; break;
    case 'S': cfg.ngf = 32; cfg.n_blocks = 9; break;
    case 'B': cfg.ngf = 64; cfg.n_blocks = 5; break;
    default: throw ShapeError(std::string("unknown variant '") + tag + "', expected T, S or B");
  }
  cfg.variant = static_cast<char>(std::toupper(static_cast<unsigned char>(tag)));
  cfg.block.channels = cfg.latent_channels();
  cfg.block.patch_size = 4;
  cfg.block.embed_dim = cfg.latent_channels();
  cfg.block.grkan_layers = 2;
  cfg.block.hidden_ratio = 4;
  return cfg;
}

void check_generator_input(const Shape& s) {
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError("generator: expected (B, 3, H, W) input, got " + shape_str(s));
  }
  if (s[2] == 0 || s[3] == 0 || s[2] % 16 != 0 || s[3] % 16 != 0) {
    throw ShapeError("generator: spatial size " + shape_str(s) + " must be divisible by 16");
  }
}

// ---------------------------------------------------------------- stages

template <typename T>
Tensor<T> Stage<T>::forward(const Tensor<T>& x, StageCache<T>* cache) const {
  Tensor<T> in = upsample ? upsample_nearest(x, 2) : x;
  Tensor<T> conv_out = conv.forward(in);
  NormCache<T> norm;
  Tensor<T> normed = instance_norm(conv_out, nullptr, nullptr, &norm);
  Tensor<T> act_out = activation(normed, act);
  Tensor<T> out = scconv_forward(act_out, sc, cache ? &cache->sc : nullptr);
  if (cache) {
    cache->input = std::move(in);
    cache->conv_out = std::move(conv_out);
    cache->norm = std::move(norm);
    cache->normed = std::move(normed);
    cache->act_out = std::move(act_out);
  }
  return out;
}

template <typename T>
Tensor<T> Stage<T>::backward(const StageCache<T>& cache, const Tensor<T>& dy) {
  Tensor<T> dact = scconv_backward(sc, cache.sc, dy);
  Tensor<T> dnormed = activation_backward(cache.normed, cache.act_out, dact, act);
  Tensor<T> dconv = Tensor<T>::zeros_like(cache.conv_out);
  instance_norm_backward(cache.conv_out, cache.norm, nullptr, dnormed, dconv, nullptr, nullptr);
  Tensor<T> din = conv.backward(cache.input, dconv);
  return upsample ? upsample_nearest_backward(din, 2) : din;
}

template <typename T>
void Stage<T>::collect(ParamRefs<T>& out) {
  conv.collect(out);
  sc.collect(out);
}

template <typename T>
std::uint64_t Stage<T>::macs(std::size_t batch, std::size_t h_in, std::size_t w_in) const {
  const std::size_t h = upsample ? 2 * h_in : h_in, w = upsample ? 2 * w_in : w_in;
  const std::size_t k = conv.kernel(), pad = conv.spec.padding, st = conv.spec.stride;
  const std::size_t ho = conv_out_size(h, k, st, pad), wo = conv_out_size(w, k, st, pad);
  return conv.macs(batch, ho, wo) + sc.macs(batch, ho, wo);
}

namespace {

template <typename T>
Stage<T> make_stage(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
                    Conv2dSpec spec, bool upsample, const GeneratorConfig& cfg, Rng& rng) {
  Stage<T> s;
  s.conv = ConvLayer<T>(prefix + ".conv", cin, cout, k, spec, rng);
  s.sc = make_scconv<T>(prefix + ".scconv", cout, rng, cfg.scconv_rate);
  s.act = cfg.encoder_activation;
  s.upsample = upsample;
  return s;
}

template <typename T>
Tensor<T> merge_skip(const Tensor<T>& x, const Tensor<T>& skip, SkipMode mode, const char* where) {
  if (mode == SkipMode::kConcat) {
    if (x.rank() != 4 || skip.rank() != 4 || x.dim(0) != skip.dim(0) || x.dim(2) != skip.dim(2) ||
        x.dim(3) != skip.dim(3)) {
      throw ShapeError(std::string(where) + ": skip " + shape_str(skip.shape()) +
                       " cannot be concatenated to " + shape_str(x.shape()));
    }
    return channel_concat(x, skip);
  }
  expect_shape(skip.shape(), x.shape(), where);
  Tensor<T> out = x;
  out += skip;
  return out;
}

/// Splits the gradient of a merged tensor into (d x, d skip).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_skip(const Tensor<T>& d, std::size_t x_channels,
                                           SkipMode mode) {
  if (mode == SkipMode::kConcat) {
    return {channel_slice(d, 0, x_channels), channel_slice(d, x_channels, d.dim(1) - x_channels)};
  }
  return {d, d};
}

template <typename T>
void add_if(Tensor<T>& acc, const Tensor<T>& g) {
  if (g.numel() != 0) acc += g;
}

}  // namespace

// ---------------------------------------------------------------- generator

template <typename T>
Generator<T> make_generator(const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t f = cfg.ngf;
  const std::size_t m = cfg.skip_mode == SkipMode::kConcat ? 2 : 1;
  Generator<T> g;
  g.cfg = cfg;
  Rng r = rng.stream("generator");
  g.stem = make_stage<T>("gen.stem", 3, f, 7, {1, 3, PadMode::kReflect}, false, cfg, r);
  g.down1 = make_stage<T>("gen.down1", f, 2 * f, 3, {2, 1}, false, cfg, r);
  g.down2 = make_stage<T>("gen.down2", 2 * f, 4 * f, 3, {2, 1}, false, cfg, r);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    Rng br = rng.stream("generator.block", i);
    g.blocks.push_back(make_kat_block<T>(cfg.block, br, "gen.blocks." + std::to_string(i)));
  }
  g.up1 = make_stage<T>("gen.up1", 4 * f, 2 * f, 3, {1, 1}, true, cfg, r);
  g.up2 = make_stage<T>("gen.up2", 2 * f * m, f, 3, {1, 1}, true, cfg, r);
  g.head = ConvLayer<T>("gen.head", f * m, 3, 7, {1, 3, PadMode::kReflect}, r);
  return g;
}

template <typename T>
Tensor<T> Generator<T>::encode(const Tensor<T>& img, FeatureStack<T>& stack,
                               EncodeCache<T>* cache) const {
  check_generator_input(img.shape());
  stack.layers[0] = stem.forward(img, cache ? &cache->stem : nullptr);
  stack.layers[1] = down1.forward(stack.layers[0], cache ? &cache->down1 : nullptr);
  stack.layers[2] = down2.forward(stack.layers[1], cache ? &cache->down2 : nullptr);
  if (cache) cache->blocks.assign(blocks.size(), KatBlockCache<T>{});
  Tensor<T> z = stack.layers[2];
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    z = blocks[i].forward(z, cache ? &cache->blocks[i] : nullptr);
    if (i + 1 == cfg.mid_block()) stack.layers[3] = z;
  }
  stack.layers[4] = z;
  return z;
}

template <typename T>
Tensor<T> Generator<T>::decode(const Tensor<T>& latent, const Tensor<T>& skip0,
                               const Tensor<T>& skip1, DecodeCache<T>* cache) const {
  Tensor<T> u1 = merge_skip(up1.forward(latent, cache ? &cache->up1 : nullptr), skip1,
                            cfg.skip_mode, "decoder skip 1");
  Tensor<T> u2 = merge_skip(up2.forward(u1, cache ? &cache->up2 : nullptr), skip0, cfg.skip_mode,
                            "decoder skip 0");
  Tensor<T> out = activation(head.forward(u2), Activation::kTanh);
  if (cache) {
    cache->head_in = std::move(u2);
    cache->out = out;
  }
  return out;
}

template <typename T>
Tensor<T> Generator<T>::forward(const Tensor<T>& img, FeatureStack<T>* stack,
                                GeneratorCache<T>* cache) const {
  FeatureStack<T> local;
  FeatureStack<T>& s = stack ? *stack : local;
  Tensor<T> z = encode(img, s, cache ? &cache->enc : nullptr);
  return decode(z, s.layers[0], s.layers[1], cache ? &cache->dec : nullptr);
}

template <typename T>
Tensor<T> Generator<T>::encode_backward(const EncodeCache<T>& cache, Tensor<T> dlatent,
                                        Tensor<T> dskip0, Tensor<T> dskip1,
                                        const FeatureGrads<T>* dfeat) {
  if (dfeat) add_if(dlatent, (*dfeat)[4]);
  Tensor<T> dz = std::move(dlatent);
  for (std::size_t i = blocks.size(); i-- > 0;) {
    if (dfeat && i + 1 == cfg.mid_block()) add_if(dz, (*dfeat)[3]);
    dz = blocks[i].backward(cache.blocks[i], dz);
  }
  if (dfeat) add_if(dz, (*dfeat)[2]);
  Tensor<T> d1 = down2.backward(cache.down2, dz);
  add_if(d1, dskip1);
  if (dfeat) add_if(d1, (*dfeat)[1]);
  Tensor<T> d0 = down1.backward(cache.down1, d1);
  add_if(d0, dskip0);
  if (dfeat) add_if(d0, (*dfeat)[0]);
  return stem.backward(cache.stem, d0);
}

template <typename T>
Tensor<T> Generator<T>::backward(const GeneratorCache<T>& cache, const Tensor<T>& dout,
                                 const FeatureGrads<T>* dfeat) {
  const DecodeCache<T>& dc = cache.dec;
  expect_shape(dout.shape(), dc.out.shape(), "generator backward");
  // tanh' is read from the output argument.
  Tensor<T> dhead = activation_backward(dc.out, dc.out, dout, Activation::kTanh);
  Tensor<T> du2 = head.backward(dc.head_in, dhead);
  auto [du2x, dskip0] = split_skip(du2, cfg.ngf, cfg.skip_mode);
  Tensor<T> du1 = up2.backward(dc.up2, du2x);
  auto [du1x, dskip1] = split_skip(du1, 2 * cfg.ngf, cfg.skip_mode);
  Tensor<T> dz = up1.backward(dc.up1, du1x);
  return encode_backward(cache.enc, std::move(dz), std::move(dskip0), std::move(dskip1), dfeat);
}

template <typename T>
void Generator<T>::collect(ParamRefs<T>& out) {
  stem.collect(out);
  down1.collect(out);
  down2.collect(out);
  for (auto& b : blocks) b.collect(out);
  up1.collect(out);
  up2.collect(out);
  head.collect(out);
}

template <typename T>
ParamRefs<T> Generator<T>::params() {
  ParamRefs<T> out;
  collect(out);
  return out;
}

template <typename T>
std::uint64_t Generator<T>::macs(std::size_t batch, std::size_t h, std::size_t w) const {
  std::uint64_t total = stem.macs(batch, h, w);
  total += down1.macs(batch, h, w);
  total += down2.macs(batch, h / 2, w / 2);
  for (const auto& b : blocks) total += b.macs(batch, h / 4, w / 4);
  total += up1.macs(batch, h / 4, w / 4);
  total += up2.macs(batch, h / 2, w / 2);
  total += head.macs(batch, h, w);
  return total;
}

// ---------------------------------------------------------------- discriminator

std::size_t discriminator_output_size(std::size_t in) {
  std::size_t s = in;
  for (std::size_t stride : {2, 2, 2, 1, 1}) {
    if (s + 2 < 4) return 0;
    s = conv_out_size(s, 4, stride, 1);
  }
  return s;
}

namespace {

constexpr std::size_t kDiscLayers = 5;

bool disc_norm(std::size_t i) { return i >= 1 && i <= 3; }
bool disc_act(std::size_t i) { return i + 1 < kDiscLayers; }

}  // namespace

template <typename T>
Discriminator<T> make_discriminator(Rng& rng, std::size_t ndf) {
  Rng r = rng.stream("discriminator");
  const std::size_t ch[kDiscLayers + 1] = {3, ndf, 2 * ndf, 4 * ndf, 8 * ndf, 1};
  const std::size_t stride[kDiscLayers] = {2, 2, 2, 1, 1};
  Discriminator<T> d;
  for (std::size_t i = 0; i < kDiscLayers; ++i) {
    d.convs.emplace_back("disc." + std::to_string(i), ch[i], ch[i + 1], 4,
                         Conv2dSpec{stride[i], 1}, r);
  }
  return d;
}

template <typename T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& img, DiscriminatorCache<T>* cache) const {
  if (img.rank() != 4 || img.dim(1) != 3) {
    throw ShapeError("discriminator: expected (B, 3, H, W), got " + shape_str(img.shape()));
  }
  if (img.dim(2) < kMinDiscriminatorInput || img.dim(3) < kMinDiscriminatorInput) {
    throw ShapeError("discriminator: input " + shape_str(img.shape()) + " smaller than " +
                     std::to_string(kMinDiscriminatorInput) + "x" +
                     std::to_string(kMinDiscriminatorInput));
  }
  if (cache) {
    cache->conv_in.assign(convs.size(), Tensor<T>{});
    cache->conv_out.assign(convs.size(), Tensor<T>{});
    cache->norm.assign(convs.size(), NormCache<T>{});
    cache->pre_act.assign(convs.size(), Tensor<T>{});
  }
  Tensor<T> x = img;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    Tensor<T> y = convs[i].forward(x);
    if (cache) {
      cache->conv_in[i] = std::move(x);
      cache->conv_out[i] = y;
    }
    if (disc_norm(i)) y = instance_norm(y, nullptr, nullptr, cache ? &cache->norm[i] : nullptr);
    if (disc_act(i)) {
      if (cache) cache->pre_act[i] = y;
      y = activation(y, Activation::kLeakyRelu02);
    }
    x = std::move(y);
  }
  return x;
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const DiscriminatorCache<T>& cache, const Tensor<T>& dy,
                                     bool params) {
  Tensor<T> d = dy;
  for (std::size_t i = convs.size(); i-- > 0;) {
    if (disc_act(i)) {
      d = activation_backward(cache.pre_act[i], cache.conv_in[i + 1], d, Activation::kLeakyRelu02);
    }
    if (disc_norm(i)) {
      Tensor<T> dn = Tensor<T>::zeros_like(cache.conv_out[i]);
      instance_norm_backward(cache.conv_out[i], cache.norm[i], nullptr, d, dn, nullptr, nullptr);
      d = std::move(dn);
    }
    d = convs[i].backward(cache.conv_in[i], d, params);
  }
  return d;
}

template <typename T>
void Discriminator<T>::collect(ParamRefs<T>& out) {
  for (auto& c : convs) c.collect(out);
}

template <typename T>
ParamRefs<T> Discriminator<T>::params() {
  ParamRefs<T> out;
  collect(out);
  return out;
}

template <typename T>
std::uint64_t Discriminator<T>::macs(std::size_t batch, std::size_t h, std::size_t w) const {
  std::uint64_t total = 0;
  for (const auto& c : convs) {
    h = conv_out_size(h, 4, c.spec.stride, 1);
    w = conv_out_size(w, 4, c.spec.stride, 1);
    total += c.macs(batch, h, w);
  }
  return total;
}

// ---------------------------------------------------------------- projection heads

template <typename T>
ProjectionHead<T> make_projection_head(const std::string& prefix, std::size_t channels, Rng& rng,
                                       std::size_t dim) {
  ProjectionHead<T> h;
  h.w1 = Param<T>(prefix + ".fc1.weight", {dim, channels});
  h.b1 = Param<T>(prefix + ".fc1.bias", {dim});
  h.w2 = Param<T>(prefix + ".fc2.weight", {dim, dim});
  h.b2 = Param<T>(prefix + ".fc2.bias", {dim});
  init_fan_in(h.w1.value, channels, rng);
  init_fan_in(h.w2.value, dim, rng);
  return h;
}

template <typename T>
Tensor<T> ProjectionHead<T>::forward(const Tensor<T>& rows, HeadCache<T>* cache) const {
  if (rows.rank() != 2 || rows.dim(1) != w1.value.dim(1)) {
    throw ShapeError("projection head: expected (S, " + std::to_string(w1.value.dim(1)) +
                     ") rows, got " + shape_str(rows.shape()));
  }
  Tensor<T> hp = linear(rows, w1.value, &b1.value);
  Tensor<T> h = activation(hp, Activation::kRelu);
  Tensor<T> op = linear(h, w2.value, &b2.value);
  const std::size_t S = op.dim(0), D = op.dim(1);
  Tensor<T> out = op;
  std::vector<T> norms(S);
  for (std::size_t s = 0; s < S; ++s) {
    T* r = out.data() + s * D;
    double acc = 0;
    for (std::size_t j = 0; j < D; ++j) acc += static_cast<double>(r[j]) * r[j];
    // A zero row has no direction; the floor keeps it finite.
    const T n = static_cast<T>(std::max(std::sqrt(acc), 1e-12));
    norms[s] = n;
    for (std::size_t j = 0; j < D; ++j) r[j] /= n;
  }
  if (cache) {
    cache->input = rows;
    cache->hidden_pre = std::move(hp);
    cache->hidden = std::move(h);
    cache->out_pre = std::move(op);
    cache->norms = std::move(norms);
  }
  return out;
}

template <typename T>
Tensor<T> ProjectionHead<T>::backward(const HeadCache<T>& cache, const Tensor<T>& dy) {
  const std::size_t S = dy.dim(0), D = dy.dim(1);
  Tensor<T> dop({S, D});
  for (std::size_t s = 0; s < S; ++s) {
    const T n = cache.norms[s];
    const T* g = dy.data() + s * D;
    const T* p = cache.out_pre.data() + s * D;
    double dot = 0;
    for (std::size_t j = 0; j < D; ++j) dot += static_cast<double>(g[j]) * p[j];
    const double k = dot / (static_cast<double>(n) * n);
    for (std::size_t j = 0; j < D; ++j) dop[s * D + j] = static_cast<T>((g[j] - k * p[j]) / n);
  }
  Tensor<T> dh = Tensor<T>::zeros_like(cache.hidden);
  linear_backward_into(cache.hidden, w2.value, dop, &dh, &w2.grad, &b2.grad);
  Tensor<T> dhp = activation_backward(cache.hidden_pre, cache.hidden, dh, Activation::kRelu);
  Tensor<T> dx = Tensor<T>::zeros_like(cache.input);
  linear_backward_into(cache.input, w1.value, dhp, &dx, &w1.grad, &b1.grad);
  return dx;
}

template <typename T>
void ProjectionHead<T>::collect(ParamRefs<T>& out) {
  out.push_back(&w1);
  out.push_back(&b1);
  out.push_back(&w2);
  out.push_back(&b2);
}

template <typename T>
std::uint64_t ProjectionHead<T>::macs(std::size_t rows) const {
  return std::uint64_t{rows} * (w1.value.numel() + w2.value.numel());
}

template <typename T>
Tensor<T> gather_locations(const Tensor<T>& feat, const std::vector<std::size_t>& idx) {
  if (feat.rank() != 4) throw ShapeError("gather_locations: expected a 4-d feature map");
  const std::size_t B = feat.dim(0), C = feat.dim(1), HW = feat.dim(2) * feat.dim(3);
  const std::size_t S = idx.size();
  Tensor<T> rows({B * S, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s) {
      if (idx[s] >= HW) throw ShapeError("gather_locations: index out of range");
      for (std::size_t c = 0; c < C; ++c) {
        rows[(b * S + s) * C + c] = feat[(b * C + c) * HW + idx[s]];
      }
    }
  return rows;
}

template <typename T>
void scatter_locations(const Tensor<T>& drows, const std::vector<std::size_t>& idx,
                       Tensor<T>& dfeat) {
  const std::size_t B = dfeat.dim(0), C = dfeat.dim(1), HW = dfeat.dim(2) * dfeat.dim(3);
  const std::size_t S = idx.size();
  expect_shape(drows.shape(), {B * S, C}, "scatter_locations");
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < C; ++c) {
        dfeat[(b * C + c) * HW + idx[s]] += drows[(b * S + s) * C + c];
      }
}

template <typename T>
std::vector<Tensor<T>> projection_head_forward(const FeatureStack<T>& stack,
                                               const std::vector<ProjectionHead<T>>& heads,
                                               const std::vector<std::vector<std::size_t>>& idx) {
  if (heads.size() != kNumFeatureLayers || idx.size() != kNumFeatureLayers) {
    throw ShapeError("projection heads: need one head and one index set per feature layer, got " +
                     std::to_string(heads.size()) + " heads and " + std::to_string(idx.size()) +
                     " index sets");
  }
  std::vector<Tensor<T>> out;
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    out.push_back(heads[l].forward(gather_locations(stack.layers[l], idx[l])));
  }
  return out;
}

// ---------------------------------------------------------------- variants

template <typename T>
ParamRefs<T> Model<T>::generator_side_params() {
  ParamRefs<T> out;
  gen.collect(out);
  for (auto& h : heads) h.collect(out);
  return out;
}

template <typename T>
Model<T> build_model(const GeneratorConfig& cfg, Rng& rng) {
  Model<T> m;
  m.gen = make_generator<T>(cfg, rng);
  m.disc = make_discriminator<T>(rng);
  Rng hr = rng.stream("heads");
  const auto ch = cfg.feature_channels();
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    m.heads.push_back(make_projection_head<T>("head." + std::to_string(l), ch[l], hr));
  }
  return m;
}

template <typename T>
Model<T> build_variant(char tag, Rng& rng) {
  return build_model<T>(variant_config(tag), rng);
}

#define UIDKAT_INSTANTIATE_NETWORKS(T)                                                          \
  template struct ConvLayer<T>;                                                                 \
  template struct SCConv<T>;                                                                    \
  template SCConv<T> make_scconv(const std::string&, std::size_t, Rng&, std::size_t);          \
  template Tensor<T> scconv_forward(const Tensor<T>&, const SCConv<T>&, SCConvCache<T>*);     \
  template Tensor<T> scconv_backward(SCConv<T>&, const SCConvCache<T>&, const Tensor<T>&);    \
  template struct Stage<T>;                                                                     \
  template struct Generator<T>;                                                                 \
  template Generator<T> make_generator(const GeneratorConfig&, Rng&);                          \
  template struct Discriminator<T>;                                                             \
  template Discriminator<T> make_discriminator(Rng&, std::size_t);                             \
  template struct ProjectionHead<T>;                                                            \
  template ProjectionHead<T> make_projection_head(const std::string&, std::size_t, Rng&,       \
                                                  std::size_t);                                 \
  template Tensor<T> gather_locations(const Tensor<T>&, const std::vector<std::size_t>&);      \
  template void scatter_locations(const Tensor<T>&, const std::vector<std::size_t>&,           \
                                  Tensor<T>&);                                                  \
  template std::vector<Tensor<T>> projection_head_forward(                                     \
      const FeatureStack<T>&, const std::vector<ProjectionHead<T>>&,                           \
      const std::vector<std::vector<std::size_t>>&);                                           \
  template struct Model<T>;                                                                     \
  template Model<T> build_model(const GeneratorConfig&, Rng&);                                 \
  template Model<T> build_variant(char, Rng&);

UIDKAT_INSTANTIATE_NETWORKS(float)
UIDKAT_INSTANTIATE_NETWORKS(double)

}  // namespace uidkat
