#include "uidkat/gradsuite.hpp"

#include <cmath>

#include "uidkat/grkan.hpp"
#include "uidkat/kat_block.hpp"
#include "uidkat/losses.hpp"
#include "uidkat/networks.hpp"
#include "uidkat/ops.hpp"

namespace uidkat {

namespace {

using TD = Tensor<double>;
using Inputs = std::vector<TD>;

TD random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TD t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const TD& a, const TD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

void randomize(RationalParams<double>& r, Rng& rng, double scale) {
  for (auto& v : r.a.value.vec()) v = rng.uniform(-scale, scale);
  for (auto& v : r.b.value.vec()) v = rng.uniform(-scale, scale);
}

// Redraws inputs whose denominator polynomial is near the |.| kink.
void push_off_kinks(TD& x, const RationalParams<double>& r, Rng& rng) {
  const std::size_t width = x.dim(1) / r.groups;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t g = (i % x.dim(1)) / width;
    for (;;) {
      double s = 0;
      for (std::size_t k = r.den_order; k-- > 0;) s = (s + r.b.value[g * r.den_order + k]) * x[i];
      if (std::abs(s) >= 1e-3 && std::abs(x[i]) >= 1e-3) break;
      x[i] = rng.uniform(-2.0, 2.0);
    }
  }
}

// Five-point stencil throughout; the step balances O(h^4) truncation against
// roundoff of order eps |loss| / h.
GradCheckOptions options(bool composed, std::uint64_t seed, double h = 3e-5) {
  GradCheckOptions o;
  o.tolerance = composed ? kComposedTolerance : kSingleOpTolerance;
  o.seed = seed;
  o.h = h;
  o.fourth_order = true;
  return o;
}

GradSuiteCase rational_case(Rng& rng) {
  const std::size_t groups = 4, n = between(rng, 2, 8);
  RationalParams<double> r("r", groups);
  randomize(r, rng, 1.0);
  TD x = random({n, 8}, rng, -2, 2);
  push_off_kinks(x, r, rng);
  const TD up = random({n, 8}, rng);
  const auto g = rational_backward(x, r, up);
  auto report = finite_diff_check<double>(
      [&] { return dot(rational_eval(x, r), up); },
      {{"input", &x, &g.input}, {"numer", &r.a.value, &g.a}, {"denom", &r.b.value, &g.b}},
      options(false, rng.next_u64()));
  return {"rational_eval", false, report};
}

GradSuiteCase grkan_case(Rng& rng) {
  const std::size_t n = between(rng, 2, 8), d_out = between(rng, 2, 8);
  auto layer = grkan_init<double>(8, d_out, 4, RationalInit::kFitSilu, rng);
  randomize(layer.rational, rng, 0.7);
  TD x = random({n, 8}, rng, -2, 2);
  push_off_kinks(x, layer.rational, rng);
  const TD up = random({n, d_out}, rng);
  ParamRefs<double> ps;
  layer.collect(ps);
  zero_grads(ps);
  GRKANCache<double> cache;
  grkan_forward(x, layer, &cache);
  const TD dx = grkan_backward(layer, cache, up);
  auto targets = param_targets(ps);
  targets.push_back({"input", &x, &dx});
  auto report = finite_diff_check<double>([&] { return dot(grkan_forward(x, layer), up); }, targets,
                                          options(false, rng.next_u64()));
  return {"grkan_forward", false, report};
}

GradSuiteCase conv_case(Rng& rng, const char* name, std::size_t k, Conv2dSpec spec) {
  const std::size_t h = between(rng, 7, 8), w = between(rng, 7, 8);
  Inputs in{random({2, 2, h, w}, rng), random({3, 2, k, k}, rng), random({3}, rng)};
  auto report = check_op<double>(
      [&](const Inputs& v) { return conv2d(v[0], v[1], &v[2], spec); },
      [&](const Inputs& v, const TD& up) {
        auto g = conv2d_backward(v[0], v[1], up, spec);
        return Inputs{g.input, g.weight, g.bias};
      },
      in, {"input", "weight", "bias"}, options(false, rng.next_u64()));
  return {name, false, report};
}

GradSuiteCase layer_norm_case(Rng& rng) {
  const std::size_t n = between(rng, 2, 8), c = between(rng, 4, 16);
  Inputs in{random({n, c}, rng, -2, 3), random({c}, rng, 0.5, 1.5), random({c}, rng)};
  auto report = check_op<double>(
      [](const Inputs& v) { return layer_norm(v[0], &v[1], &v[2]); },
      [c](const Inputs& v, const TD& up) {
        NormCache<double> cache;
        layer_norm(v[0], &v[1], &v[2], &cache);
        TD dx = TD::zeros_like(v[0]), dg({c}), db({c});
        layer_norm_backward(v[0], cache, &v[1], up, dx, &dg, &db);
        return Inputs{dx, dg, db};
      },
      in, {"input", "gamma", "beta"}, options(false, rng.next_u64()));
  return {"layer_norm", false, report};
}

GradSuiteCase instance_norm_case(Rng& rng) {
  const std::size_t c = between(rng, 1, 4), h = between(rng, 3, 8), w = between(rng, 3, 8);
  Inputs in{random({2, c, h, w}, rng), random({c}, rng, 0.5, 1.5), random({c}, rng)};
  auto report = check_op<double>(
      [](const Inputs& v) { return instance_norm(v[0], &v[1], &v[2]); },
      [c](const Inputs& v, const TD& up) {
        NormCache<double> cache;
        instance_norm(v[0], &v[1], &v[2], &cache);
        TD dx = TD::zeros_like(v[0]), dg({c}), db({c});
        instance_norm_backward(v[0], cache, &v[1], up, dx, &dg, &db);
        return Inputs{dx, dg, db};
      },
      in, {"input", "gamma", "beta"}, options(false, rng.next_u64()));
  return {"instance_norm", false, report};
}

GradSuiteCase scconv_case(Rng& rng) {
  const std::size_t c = 2 * between(rng, 1, 3), s = 4 * between(rng, 1, 2);
  auto sc = make_scconv<double>("sc", c, rng);
  TD x = random({1, c, s, s}, rng);
  const TD up = random({1, c, s, s}, rng);
  ParamRefs<double> ps;
  sc.collect(ps);
  zero_grads(ps);
  SCConvCache<double> cache;
  scconv_forward(x, sc, &cache);
  const TD dx = scconv_backward(sc, cache, up);
  auto targets = param_targets(ps);
  targets.push_back({"input", &x, &dx});
  auto report = finite_diff_check<double>([&] { return dot(scconv_forward(x, sc), up); }, targets,
                                          options(true, rng.next_u64()));
  return {"scconv_forward", true, report};
}

GradSuiteCase dual_block_case(Rng& rng) {
  BlockConfig cfg;
  cfg.channels = 2;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.grkan_groups = 4;
  cfg.grkan_layers = 2;
  cfg.hidden_ratio = 2;
  auto blk = make_kat_block<double>(cfg, rng);
  for (auto* p : blk.params()) {
    if (p->name.find("rational") != std::string::npos) continue;
    for (auto& v : p->value.vec()) v += rng.uniform(-0.2, 0.2);
  }
  const std::size_t h = 2 * between(rng, 2, 4), w = 2 * between(rng, 2, 4);
  TD x = random({2, 2, h, w}, rng);
  const TD up = random({2, 2, h, w}, rng);
  auto ps = blk.params();
  zero_grads(ps);
  KatBlockCache<double> cache;
  blk.forward(x, &cache);
  const TD dx = blk.backward(cache, up);
  auto targets = param_targets(ps);
  targets.push_back({"input", &x, &dx});
  auto report = finite_diff_check<double>([&] { return dot(dual_grkan_forward(x, blk), up); },
                                          targets, options(true, rng.next_u64()));
  return {"dual_grkan_block", true, report};
}

GradSuiteCase lsgan_g_case(Rng& rng) {
  TD fake = random({1, 1, between(rng, 2, 8), between(rng, 2, 8)}, rng);
  TD d;
  lsgan_generator_loss(fake, &d);
  auto report = finite_diff_check<double>([&] { return lsgan_generator_loss(fake); },
                                          {{"fake", &fake, &d}}, options(false, rng.next_u64()));
  return {"lsgan_generator_loss", false, report};
}

GradSuiteCase lsgan_d_case(Rng& rng) {
  const std::size_t s = between(rng, 2, 8);
  TD real = random({2, 1, s, s}, rng), fake = random({2, 1, s, s}, rng);
  TD dr, df;
  lsgan_discriminator_loss(real, fake, &dr, &df);
  auto report = finite_diff_check<double>([&] { return lsgan_discriminator_loss(real, fake); },
                                          {{"real", &real, &dr}, {"fake", &fake, &df}},
                                          options(false, rng.next_u64()));
  return {"lsgan_discriminator_loss", false, report};
}

GradSuiteCase identity_case(Rng& rng) {
  const std::size_t s = between(rng, 2, 8);
  TD gen = random({1, 3, s, s}, rng), clean = random({1, 3, s, s}, rng);
  // Keep every difference clear of the |.| kink.
  for (std::size_t i = 0; i < gen.numel(); ++i) {
    while (std::abs(gen[i] - clean[i]) < 1e-3) gen[i] = rng.uniform(-1, 1);
  }
  TD d;
  identity_loss(gen, clean, &d);
  auto report = finite_diff_check<double>([&] { return identity_loss(gen, clean); },
                                          {{"gen", &gen, &d}}, options(false, rng.next_u64()));
  return {"identity_loss", false, report};
}

TD unit_rows(std::size_t r, std::size_t d, Rng& rng) {
  TD t = random({r, d}, rng);
  for (std::size_t i = 0; i < r; ++i) {
    double n = 0;
    for (std::size_t c = 0; c < d; ++c) n += t[i * d + c] * t[i * d + c];
    n = std::sqrt(n);
    for (std::size_t c = 0; c < d; ++c) t[i * d + c] /= n;
  }
  return t;
}

GradSuiteCase nce_rows_case(Rng& rng) {
  const std::size_t s = between(rng, 2, 8), d = between(rng, 3, 8);
  TD q = unit_rows(2 * s, d, rng), k = unit_rows(2 * s, d, rng);
  TD dq = TD::zeros_like(q), dk = TD::zeros_like(k);
  nce_rows(q, k, s, kDefaultTau, &dq, &dk);
  // The summed cross-entropy reaches O(100), so a wider step keeps roundoff
  // below the smallest checked entries.
  auto report = finite_diff_check<double>([&] { return nce_rows(q, k, s, kDefaultTau); },
                                          {{"query", &q, &dq}, {"key", &k, &dk}},
                                          options(false, rng.next_u64(), 2e-4));
  return {"patch_nce_rows", false, report};
}

GradSuiteCase patch_nce_case(Rng& rng) {
  const std::array<std::size_t, kNumFeatureLayers> channels = {2, 3, 4, 4, 4};
  std::vector<ProjectionHead<double>> heads;
  FeatureStack<double> in, out;
  std::vector<std::vector<std::size_t>> locs(kNumFeatureLayers);
  PatchNCEOptions opts;
  opts.locations = 3;
  opts.detach_keys = false;
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    heads.push_back(make_projection_head<double>("head" + std::to_string(l), channels[l], rng, 6));
    const std::size_t s = 8 >> std::min<std::size_t>(l, 2);
    in.layers[l] = random({2, channels[l], s, s}, rng);
    out.layers[l] = random({2, channels[l], s, s}, rng);
    auto perm = rng.permutation(s * s);
    perm.resize(opts.locations);
    locs[l] = perm;
  }
  ParamRefs<double> ps;
  for (auto& h : heads) h.collect(ps);
  // Hidden pre-activations are kept at least 0.5 from the ReLU kink: inputs
  // lie in [-1, 1] and |fc1 weights| <= 1 / C, so |w.x| <= 1 while biases
  // alternate in sign with magnitude in [1.5, 2]. Both mask branches are
  // exercised. Random fc2 biases keep projected rows away from zero, where L2
  // normalisation is not differentiable.
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    auto& h = heads[l];
    const double bound = 1.0 / static_cast<double>(channels[l]);
    for (auto& v : h.w1.value.vec()) v = rng.uniform(-bound, bound);
    auto& b1 = h.b1.value.vec();
    for (std::size_t j = 0; j < b1.size(); ++j) b1[j] = (j % 2 ? -1.0 : 1.0) * rng.uniform(1.5, 2.0);
    for (auto& v : h.b2.value.vec()) v = rng.uniform(-0.5, 0.5);
  }
  zero_grads(ps);
  PatchNCEGrads<double> g;
  patch_nce_loss_at(in, out, heads, opts, locs, &g);
  auto targets = param_targets(ps);
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    targets.push_back({"output." + std::to_string(l), &out.layers[l], &g.output[l]});
    targets.push_back({"input." + std::to_string(l), &in.layers[l], &g.input[l]});
  }
  auto opt = options(true, rng.next_u64());
  opt.max_entries = 12;
  auto report = finite_diff_check<double>(
      [&] { return patch_nce_loss_at(in, out, heads, opts, locs); }, targets, opt);
  return {"patch_nce_loss", true, report};
}

}  // namespace

std::vector<GradSuiteCase> run_gradient_suite(
    std::uint64_t seed, const std::function<void(const GradSuiteCase&)>& on_case) {
  const Rng root(seed);
  std::vector<GradSuiteCase> out;
  std::uint64_t idx = 0;
  const auto run = [&](auto&& fn) {
    Rng r = root.stream("gradsuite", idx++);
    out.push_back(fn(r));
    if (on_case) on_case(out.back());
  };
  run(rational_case);
  run(grkan_case);
  run([](Rng& r) { return conv_case(r, "conv2d_3x3_s1", 3, {1, 1, PadMode::kZero}); });
  run([](Rng& r) { return conv_case(r, "conv2d_3x3_s2", 3, {2, 1, PadMode::kZero}); });
  run([](Rng& r) { return conv_case(r, "conv2d_7x7_reflect", 7, {1, 3, PadMode::kReflect}); });
  run([](Rng& r) { return conv_case(r, "conv2d_4x4_s2", 4, {2, 1, PadMode::kZero}); });
  run(layer_norm_case);
  run(instance_norm_case);
  run(scconv_case);
  run(dual_block_case);
  run(lsgan_g_case);
  run(lsgan_d_case);
  run(identity_case);
  run(nce_rows_case);
  run(patch_nce_case);
  return out;
}

}  // namespace uidkat
