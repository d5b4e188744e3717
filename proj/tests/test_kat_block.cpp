#include <cmath>

#include "doctest.h"
#include "support/test_util.hpp"
#include "uidkat/gradcheck.hpp"
#include "uidkat/kat_block.hpp"

using namespace uidkat;
using uidkat::testing::bitwise_equal;
using uidkat::testing::max_abs_diff;
using uidkat::testing::random_tensor;

namespace {

BlockConfig small_config(MixerKind token, MixerKind channel) {
  BlockConfig cfg;
  cfg.channels = 2;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.grkan_groups = 4;
  cfg.grkan_layers = 2;
  cfg.hidden_ratio = 2;
  cfg.token_mixer = token;
  cfg.channel_mixer = channel;
  return cfg;
}

template <typename T>
void randomize_params(KatBlock<T>& blk, Rng& rng, double scale) {
  for (auto* p : blk.params()) {
    if (p->name.find("rational") != std::string::npos) continue;
    for (auto& v : p->value.vec()) v += static_cast<T>(rng.uniform(-scale, scale));
  }
}

}  // namespace

TEST_CASE("patch_embed matches a brute-force patch projection") {
  Rng rng(31);
  auto cfg = small_config(MixerKind::kGrkan, MixerKind::kGrkan);
  cfg.patch_size = 4;
  auto blk = make_kat_block<double>(cfg, rng);
  randomize_params(blk, rng, 0.5);
  const auto x = random_tensor<double>({2, 2, 8, 12}, rng);
  const auto tok = patch_embed(x, blk);
  REQUIRE(tok.shape() == Shape{2, 6, 8});
  const std::size_t P = 4, gw = 3;
  double worst = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t d = 0; d < 8; ++d) {
        double acc = blk.embed_bias.value[d];
        const std::size_t py = n / gw, px = n % gw;
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < P; ++j) {
              acc += blk.embed_weight.value.at(d, c, i, j) * x.at(b, c, py * P + i, px * P + j);
            }
        worst = std::max(worst, std::abs(acc - tok[(b * 6 + n) * 8 + d]));
      }
  CHECK(worst < 1e-12);
}

TEST_CASE("patch_embed token count and width at the reference size") {
  Rng rng(32);
  BlockConfig cfg;
  cfg.channels = 128;
  cfg.patch_size = 4;
  cfg.embed_dim = 256;
  auto blk = make_kat_block<float>(cfg, rng);
  Tensor<float> x({1, 128, 64, 64});
  CHECK(patch_embed(x, blk).shape() == Shape{1, 256, 256});
}

TEST_CASE("patch_unembed matches a brute-force pixel-shuffled projection") {
  Rng rng(33);
  auto cfg = small_config(MixerKind::kGrkan, MixerKind::kGrkan);
  auto blk = make_kat_block<double>(cfg, rng);
  randomize_params(blk, rng, 0.5);
  const std::size_t P = 2, D = 8, C = 2, h = 4, w = 6, gw = w / P;
  const auto tok = random_tensor<double>({1, (h / P) * gw, D}, rng);
  const auto out = patch_unembed(tok, blk, h, w);
  REQUIRE(out.shape() == Shape{1, C, h, w});
  double worst = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t oc = c * P * P + (y % P) * P + (x % P);
        const std::size_t n = (y / P) * gw + x / P;
        double acc = blk.unembed_bias.value[oc];
        for (std::size_t d = 0; d < D; ++d) acc += blk.unembed_weight.value[oc * D + d] * tok[n * D + d];
        worst = std::max(worst, std::abs(acc - out.at(0, c, y, x)));
      }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(patch_unembed(tok, blk, 4, 4), ShapeError);
}

TEST_CASE("block reduces to the identity when embed and unembed are inverse and mixers vanish") {
  Rng rng(34);
  BlockConfig cfg;
  cfg.channels = 1;
  cfg.patch_size = 2;
  cfg.embed_dim = 4;
  cfg.token_mixer = MixerKind::kMlp;
  cfg.channel_mixer = MixerKind::kMlp;
  auto blk = make_kat_block<double>(cfg, rng);
  // Embed dim i reads patch pixel i; unembed channel i writes it back.
  blk.embed_weight.value.fill(0);
  blk.unembed_weight.value.fill(0);
  for (std::size_t i = 0; i < 4; ++i) {
    blk.embed_weight.value[i * 4 + i] = 1;
    blk.unembed_weight.value[i * 4 + i] = 1;
  }
  for (auto& u : blk.units) {
    u.weights[1].value.fill(0);
    u.biases[1].value.fill(0);
  }
  const auto x = random_tensor<double>({2, 1, 6, 8}, rng);
  CHECK(bitwise_equal(blk.forward(x), x));
}

TEST_CASE("attention: probabilities are row-stochastic and confined to each sample") {
  Rng rng(35);
  auto cfg = small_config(MixerKind::kAttention, MixerKind::kMlp);
  auto blk = make_kat_block<double>(cfg, rng);
  const std::size_t N = 12;
  auto tok = random_tensor<double>({2 * N, 8}, rng, -2, 2);
  MixerCache<double> cache;
  const auto out = mixer_unit_forward(tok, blk.units[0], N, &cache);
  const auto& probs = cache.saved[3];
  REQUIRE(probs.shape() == Shape{2, N, N});
  for (std::size_t r = 0; r < 2 * N; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < N; ++j) s += probs[r * N + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  // Perturbing sample 1 leaves sample 0 untouched.
  auto tok2 = tok;
  for (std::size_t i = N * 8; i < tok2.numel(); ++i) tok2[i] += 0.3;
  const auto out2 = mixer_unit_forward(tok2, blk.units[0], N, static_cast<MixerCache<double>*>(nullptr));
  double worst = 0;
  for (std::size_t i = 0; i < N * 8; ++i) worst = std::max(worst, std::abs(out2[i] - out[i]));
  CHECK(worst < 1e-13);
}

TEST_CASE("attention with zero value and output projections yields zero") {
  Rng rng(36);
  auto cfg = small_config(MixerKind::kAttention, MixerKind::kAttention);
  auto blk = make_kat_block<double>(cfg, rng);
  auto& u = blk.units[0];
  u.weights[2].value.fill(0);
  u.biases[2].value.fill(0);
  u.biases[3].value.fill(0);
  const auto tok = random_tensor<double>({16, 8}, rng);
  const auto out = mixer_forward(tok, u, 16);
  for (double v : out.vec()) CHECK(v == 0.0);
}

TEST_CASE("n_grkan_forward with n=2 is bitwise the Dual block; parameters grow with n") {
  auto cfg = small_config(MixerKind::kGrkan, MixerKind::kGrkan);
  Rng r1(37), r2(37);
  const auto dual = make_kat_block<double>(cfg, r1);
  const auto two = make_kat_block<double>(cfg, r2);
  Rng xr(38);
  const auto x = random_tensor<double>({1, 2, 8, 8}, xr);
  CHECK(bitwise_equal(n_grkan_forward(x, two), dual_grkan_forward(x, dual)));

  std::size_t prev = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    cfg.grkan_stack = n;
    Rng r(39);
    auto blk = make_kat_block<double>(cfg, r);
    CHECK(blk.units.size() == n);
    const std::size_t count = count_elements(blk.params());
    CHECK(count > prev);
    prev = count;
    CHECK(n_grkan_forward(x, blk).shape() == x.shape());
  }
}

TEST_CASE("block config validation") {
  auto cfg = small_config(MixerKind::kGrkan, MixerKind::kGrkan);
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.grkan_groups = 3;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = cfg;
  bad.grkan_stack = 5;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = cfg;
  bad.grkan_stack = 3;
  bad.token_mixer = MixerKind::kMlp;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  CHECK(parse_mixer("attention") == MixerKind::kAttention);
  CHECK(mixer_name(MixerKind::kIdentity) == "identity");
  CHECK_THROWS_AS(parse_mixer("conv"), ShapeError);

  Rng rng(40);
  auto blk = make_kat_block<double>(cfg, rng);
  Tensor<double> odd({1, 2, 7, 8});
  CHECK_THROWS_AS(blk.forward(odd), ShapeError);
  Tensor<double> wrong_c({1, 3, 8, 8});
  CHECK_THROWS_AS(blk.forward(wrong_c), ShapeError);
}

TEST_CASE("block MAC count by hand") {
  BlockConfig cfg;
  cfg.channels = 4;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.grkan_layers = 1;
  Rng rng(41);
  auto blk = make_kat_block<float>(cfg, rng);
  // 16 tokens at 8x8: embed 16*8*16, unembed 16*16*8, two units of 8*8 + 8*11 each.
  const std::uint64_t expect = 16 * 8 * 16 + 16 * 16 * 8 + 2 * 16 * (8 * 8 + 8 * 11);
  CHECK(blk.macs(1, 8, 8) == expect);
}

TEST_CASE("full block gradients in double precision for every mixer") {
  const MixerKind kinds[] = {MixerKind::kGrkan, MixerKind::kMlp, MixerKind::kAttention,
                             MixerKind::kIdentity};
  for (MixerKind kind : kinds) {
    CAPTURE(mixer_name(kind));
    Rng rng(42);
    auto cfg = small_config(kind, kind == MixerKind::kGrkan ? kind : MixerKind::kMlp);
    auto blk = make_kat_block<double>(cfg, rng);
    randomize_params(blk, rng, 0.2);
    auto x = random_tensor<double>({2, 2, 8, 8}, rng);
    const auto up = random_tensor<double>({2, 2, 8, 8}, rng);
    auto params = blk.params();
    zero_grads(params);
    KatBlockCache<double> cache;
    blk.forward(x, &cache);
    const auto dx = blk.backward(cache, up);
    auto loss = [&] {
      const auto y = blk.forward(x);
      double s = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * up[i];
      return s;
    };
    auto targets = param_targets(params);
    targets.push_back({"x", &x, &dx});
    GradCheckOptions opts;
    opts.tolerance = 1e-3;
    const auto report = finite_diff_check<double>(loss, targets, opts);
    INFO(report.failure);
    CHECK(report.passed);
  }
}
