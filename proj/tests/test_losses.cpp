#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support/test_util.hpp"
#include "uidkat/gradcheck.hpp"
#include "uidkat/losses.hpp"

using namespace uidkat;
using uidkat::testing::random_tensor;

namespace {

// Softmax cross-entropy with target class 0, written out without max-shifting
// in long double.
double softmax_ce_oracle(const std::vector<double>& logits) {
  long double s = 0;
  for (double z : logits) s += std::exp(static_cast<long double>(z));
  return static_cast<double>(std::log(s) - logits[0]);
}

double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

std::vector<std::span<const double>> spans(const std::vector<std::vector<double>>& vs) {
  return {vs.begin(), vs.end()};
}

FeatureStack<double> random_stack(const GeneratorConfig& cfg, std::size_t side, Rng& rng) {
  FeatureStack<double> s;
  const auto ch = cfg.feature_channels();
  const std::size_t sides[] = {side, side / 2, side / 4, side / 4, side / 4};
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    s.layers[l] = random_tensor<double>({1, ch[l], sides[l], sides[l]}, rng);
  }
  return s;
}

GeneratorConfig head_config() {
  GeneratorConfig cfg;
  cfg.ngf = 4;
  return cfg;
}

std::vector<ProjectionHead<double>> make_heads(const GeneratorConfig& cfg, Rng& rng,
                                               std::size_t dim) {
  std::vector<ProjectionHead<double>> heads;
  const auto ch = cfg.feature_channels();
  for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
    heads.push_back(make_projection_head<double>("h" + std::to_string(l), ch[l], rng, dim));
  }
  return heads;
}

}  // namespace

TEST_CASE("lsgan losses: trivial values and direct evaluation") {
  Tensor<double> ones({1, 1, 6, 6}, 1.0), zeros({1, 1, 6, 6}, 0.0);
  CHECK(lsgan_generator_loss(ones) == 0.0);
  CHECK(lsgan_generator_loss(zeros) == 1.0);
  CHECK(lsgan_discriminator_loss(ones, zeros) == 0.0);
  CHECK(lsgan_discriminator_loss(zeros, ones) == 2.0);

  Rng rng(81);
  const auto real = random_tensor<double>({2, 1, 5, 5}, rng, -2, 2);
  const auto fake = random_tensor<double>({2, 1, 5, 5}, rng, -2, 2);
  double g = 0, dr = 0, df = 0;
  for (std::size_t i = 0; i < fake.numel(); ++i) {
    g += (fake[i] - 1) * (fake[i] - 1);
    dr += (real[i] - 1) * (real[i] - 1);
    df += fake[i] * fake[i];
  }
  CHECK(lsgan_generator_loss(fake) == doctest::Approx(g / 50).epsilon(1e-14));
  CHECK(lsgan_discriminator_loss(real, fake) == doctest::Approx((dr + df) / 50).epsilon(1e-14));

  // Mean reductions are invariant to permuting the logits.
  auto shuffled = fake;
  auto perm = rng.permutation(fake.numel());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = fake[perm[i]];
  CHECK(lsgan_generator_loss(shuffled) == doctest::Approx(lsgan_generator_loss(fake)).epsilon(1e-15));
}

TEST_CASE("identity loss: trivial values and direct evaluation") {
  Rng rng(82);
  const auto y = random_tensor<double>({1, 3, 4, 4}, rng);
  CHECK(identity_loss(y, y) == 0.0);
  auto shifted = y;
  for (auto& v : shifted.vec()) v += 0.5;
  CHECK(identity_loss(shifted, y) == doctest::Approx(0.5).epsilon(1e-15));
  const auto g = random_tensor<double>({1, 3, 4, 4}, rng);
  double s = 0;
  for (std::size_t i = 0; i < g.numel(); ++i) s += std::abs(g[i] - y[i]);
  CHECK(identity_loss(g, y) == doctest::Approx(s / 48).epsilon(1e-14));
  Tensor<double> other({1, 3, 4, 5});
  CHECK_THROWS_AS(identity_loss(other, y), ShapeError);
}

TEST_CASE("scalar loss gradients match finite differences") {
  Rng rng(83);
  auto real = random_tensor<double>({1, 1, 4, 4}, rng, -2, 2);
  auto fake = random_tensor<double>({1, 1, 4, 4}, rng, -2, 2);
  auto clean = random_tensor<double>({1, 3, 4, 4}, rng);
  auto gen = random_tensor<double>({1, 3, 4, 4}, rng);
  Tensor<double> dg, dr, df, di;
  lsgan_generator_loss(fake, &dg);
  auto r1 = finite_diff_check<double>([&] { return lsgan_generator_loss(fake); },
                                      {{"fake", &fake, &dg}}, {});
  CHECK(r1.passed);
  lsgan_discriminator_loss(real, fake, &dr, &df);
  auto r2 = finite_diff_check<double>([&] { return lsgan_discriminator_loss(real, fake); },
                                      {{"real", &real, &dr}, {"fake", &fake, &df}}, {});
  CHECK(r2.passed);
  identity_loss(gen, clean, &di);
  auto r3 = finite_diff_check<double>([&] { return identity_loss(gen, clean); },
                                      {{"gen", &gen, &di}}, {});
  INFO(r3.failure);
  CHECK(r3.passed);
}

TEST_CASE("patch_nce_single: symmetric and closed-form cases") {
  const std::vector<double> v{1, 0, 0}, neg{0, 1, 0}, alt{0, 0, 1};
  // N = 1 with equal similarities.
  CHECK(std::abs(patch_nce_single(v, neg, {std::span<const double>(alt)}) - std::log(2.0)) < 1e-9);
  // sim(v, v+) = 1, sim(v, v-) = -1.
  const std::vector<double> opp{-1, 0, 0};
  const double expect = std::log1p(std::exp(-2.0 / 0.07));
  const double got = patch_nce_single(v, v, {std::span<const double>(opp)});
  CHECK(got == doctest::Approx(expect).epsilon(1e-9));
  CHECK(got == doctest::Approx(3.9e-13).epsilon(0.05));
  const std::vector<double> zero{0, 0, 0};
  CHECK_THROWS_AS(patch_nce_single(zero, v, {std::span<const double>(neg)}), NumericError);
  CHECK_THROWS_AS(patch_nce_single(v, v, {}), ShapeError);
}

TEST_CASE("patch_nce_single matches a brute-force softmax cross-entropy") {
  Rng rng(84);
  double worst = 0;
  for (std::size_t n : {1, 8, 63}) {
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t dim = 16;
      const auto a = random_vec(dim, rng), p = random_vec(dim, rng);
      std::vector<std::vector<double>> negs;
      for (std::size_t i = 0; i < n; ++i) negs.push_back(random_vec(dim, rng));
      std::vector<double> logits{cos_sim(a, p) / 0.07};
      for (const auto& ng : negs) logits.push_back(cos_sim(a, ng) / 0.07);
      const double got = patch_nce_single(a, p, spans(negs));
      worst = std::max(worst, std::abs(got - softmax_ce_oracle(logits)));
      CHECK(got >= 0.0);
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("patch_nce_single is invariant to positive rescaling") {
  Rng rng(85);
  const auto a = random_vec(8, rng), p = random_vec(8, rng);
  std::vector<std::vector<double>> negs{random_vec(8, rng), random_vec(8, rng)};
  const double base = patch_nce_single(a, p, spans(negs));
  auto a2 = a, p2 = p;
  for (auto& x : a2) x *= 3.7;
  for (auto& x : p2) x *= 0.02;
  for (auto& x : negs[1]) x *= 11.0;
  CHECK(patch_nce_single(a2, p2, spans(negs)) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("nce_rows: orthogonal embeddings and agreement with the single-sample form") {
  // Two orthonormal rows used as both anchors and keys.
  Tensor<double> e({2, 4});
  e[0] = 1;
  e[4 + 1] = 1;
  const double term = std::log1p(std::exp(-1.0 / 0.07));
  CHECK(nce_rows(e, e, 2, 0.07) / 2 == doctest::Approx(term).epsilon(1e-12));
  CHECK(term < 1e-6);

  Rng rng(86);
  auto q = random_tensor<double>({10, 6}, rng), k = random_tensor<double>({10, 6}, rng);
  for (auto* t : {&q, &k})
    for (std::size_t r = 0; r < 10; ++r) {
      double n = 0;
      for (std::size_t c = 0; c < 6; ++c) n += (*t)[r * 6 + c] * (*t)[r * 6 + c];
      for (std::size_t c = 0; c < 6; ++c) (*t)[r * 6 + c] /= std::sqrt(n);
    }
  double expect = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 5; ++s) {
      auto row = [&](const Tensor<double>& t, std::size_t i) {
        return std::span<const double>(t.data() + (b * 5 + i) * 6, 6);
      };
      std::vector<std::span<const double>> negs;
      for (std::size_t j = 0; j < 5; ++j)
        if (j != s) negs.push_back(row(k, j));
      expect += patch_nce_single(row(q, s), row(k, s), negs);
    }
  CHECK(nce_rows(q, k, 5, 0.07) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(nce_rows(q, k, 1, 0.07), ShapeError);

  Tensor<double> dq = Tensor<double>::zeros_like(q), dk = Tensor<double>::zeros_like(k);
  nce_rows(q, k, 5, 0.07, &dq, &dk);
  const auto report = finite_diff_check<double>([&] { return nce_rows(q, k, 5, 0.07); },
                                                {{"q", &q, &dq}, {"k", &k, &dk}}, {});
  INFO(report.failure);
  CHECK(report.passed);
}

TEST_CASE("patch_nce_loss matches a brute-force loop over layers and locations") {
  Rng rng(87);
  const auto cfg = head_config();
  auto heads = make_heads(cfg, rng, 8);
  const auto in = random_stack(cfg, 16, rng), out = random_stack(cfg, 16, rng);
  PatchNCEOptions opts;
  opts.locations = 6;
  opts.layers = {0, 2, 4};
  Rng sampler(5);
  const double got = patch_nce_loss(in, out, heads, opts, sampler);

  Rng replay(5);
  std::array<std::size_t, kNumFeatureLayers> sizes{256, 64, 16, 16, 16};
  const auto locs = sample_nce_locations(sizes, opts, replay);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t l : opts.layers) {
    const auto q = heads[l].forward(gather_locations(out.layers[l], locs[l]));
    const auto k = heads[l].forward(gather_locations(in.layers[l], locs[l]));
    for (std::size_t s = 0; s < 6; ++s) {
      std::vector<std::span<const double>> negs;
      for (std::size_t j = 0; j < 6; ++j)
        if (j != s) negs.push_back({k.data() + j * 8, 8});
      total += patch_nce_single({q.data() + s * 8, 8}, {k.data() + s * 8, 8}, negs, 0.07);
      ++count;
    }
  }
  CHECK(got == doctest::Approx(total / count).epsilon(1e-12));
}

TEST_CASE("patch_nce_loss preconditions") {
  Rng rng(88);
  const auto cfg = head_config();
  auto heads = make_heads(cfg, rng, 8);
  const auto in = random_stack(cfg, 16, rng);
  PatchNCEOptions opts;
  opts.locations = 1;
  CHECK_THROWS_AS(patch_nce_loss(in, in, heads, opts, rng), ShapeError);
  opts.locations = 17;  // the deepest layers have 16 locations
  CHECK_THROWS_AS(patch_nce_loss(in, in, heads, opts, rng), ShapeError);
  opts.locations = 16;
  CHECK_NOTHROW(patch_nce_loss(in, in, heads, opts, rng));
  opts.layers = {5};
  CHECK_THROWS_AS(patch_nce_loss(in, in, heads, opts, rng), ShapeError);
}

TEST_CASE("patch_nce_loss gradients, detached and attached keys") {
  for (bool detach : {true, false}) {
    CAPTURE(detach);
    Rng rng(89);
    const auto cfg = head_config();
    auto heads = make_heads(cfg, rng, 8);
    const auto frozen = heads;
    auto in = random_stack(cfg, 8, rng), out = random_stack(cfg, 8, rng);
    PatchNCEOptions opts;
    opts.locations = 4;
    opts.detach_keys = detach;
    Rng srng(9);
    const std::array<std::size_t, kNumFeatureLayers> sizes{64, 16, 4, 4, 4};
    const auto locs = sample_nce_locations(sizes, opts, srng);
    ParamRefs<double> params;
    for (auto& h : heads) h.collect(params);
    zero_grads(params);
    PatchNCEGrads<double> g;
    patch_nce_loss_at(in, out, heads, opts, locs, &g);

    auto targets = param_targets(params);
    for (std::size_t l = 0; l < kNumFeatureLayers; ++l) {
      targets.push_back({"out." + std::to_string(l), &out.layers[l], &g.output[l]});
      if (detach) {
        CHECK(g.input[l].numel() == 0);
      } else {
        targets.push_back({"in." + std::to_string(l), &in.layers[l], &g.input[l]});
      }
    }
    // With detached keys the loss seen by the gradient treats the key
    // embeddings as constants, so they come from an unperturbed head copy.
    auto loss = [&] {
      if (!detach) return patch_nce_loss_at(in, out, heads, opts, locs);
      double total = 0;
      std::size_t count = 0;
      for (std::size_t l : opts.layers) {
        const auto q = heads[l].forward(gather_locations(out.layers[l], locs[l]));
        const auto k = frozen[l].forward(gather_locations(in.layers[l], locs[l]));
        total += nce_rows(q, k, locs[l].size(), opts.tau);
        count += q.dim(0);
      }
      return total / static_cast<double>(count);
    };
    const auto report = finite_diff_check<double>(loss, targets, {});
    INFO(report.failure);
    CHECK(report.passed);
  }
}

TEST_CASE("total generator loss") {
  CHECK(total_generator_loss(0.5, 0.2, 0.1) == 1.2);
  CHECK(total_generator_loss(0, 0, 0) == 0.0);
  CHECK(total_generator_loss(3.0, 4.0, 5.0, LossWeights{0, 0, 0}) == 0.0);
  CHECK(total_generator_loss(2.0, 0, 0) == 2 * total_generator_loss(1.0, 0, 0));
  LossWeights bad{1, -1, 5};
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}
