// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number; the exit status is nonzero when any selected
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "support/scenes.hpp"
#include "support/test_util.hpp"
#include "uidkat/checkpoint.hpp"
#include "uidkat/eval.hpp"
#include "uidkat/gradsuite.hpp"
#include "uidkat/training.hpp"

using namespace uidkat;
using namespace uidkat::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes pinned by the acceptance criteria.
constexpr double kGradSuiteSeconds = 300;
constexpr std::size_t kPoleDraws = 1'000'000;
constexpr std::size_t kNceSamples = 10'000;
constexpr double kNceOracleTol = 1e-6;
constexpr double kNceLn2Tol = 1e-9;
constexpr double kAuditBand = 0.25;
constexpr std::size_t kToyImages = 200;
constexpr std::size_t kToyHeldOut = 20;
constexpr std::size_t kToySize = 64;
constexpr std::size_t kToyEpochs = 5;
constexpr double kToyMinutes = 60;
constexpr std::size_t kMedianWindow = 50;
constexpr double kToyPsnrGainDb = 1.0;
constexpr double kPsnrTol = 1e-9;
constexpr std::size_t kMixerSteps = 20;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uidkat_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ------------------------------------------------------------ criterion 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = run_gradient_suite(0);
  const double elapsed = seconds_since(t0);
  Outcome o;
  double worst_single = 0, worst_composed = 0;
  std::set<std::string> names;
  for (const auto& c : cases) {
    names.insert(c.name);
    double& worst = c.composed ? worst_composed : worst_single;
    worst = std::max(worst, c.report.max_rel_error());
    const double tol = c.composed ? kComposedTolerance : kSingleOpTolerance;
    if (!c.report.passed || c.report.tolerance != tol) {
      o.pass = false;
      o.detail += c.name + ": " + c.report.failure + "; ";
    }
  }
  for (const char* required :
       {"rational_eval", "grkan_forward", "conv2d_3x3_s1", "layer_norm", "instance_norm",
        "scconv_forward", "dual_grkan_block", "lsgan_generator_loss", "lsgan_discriminator_loss",
        "identity_loss", "patch_nce_loss"}) {
    if (!names.count(required)) {
      o.pass = false;
      o.detail += std::string("missing case ") + required + "; ";
    }
  }
  if (elapsed >= kGradSuiteSeconds) o.pass = false;
  o.detail += fmt("%zu cases, worst single %.2e (< %.0e), worst composed %.2e (< %.0e), %.1f s (< %.0f s)",
                  cases.size(), worst_single, kSingleOpTolerance, worst_composed, kComposedTolerance,
                  elapsed, kGradSuiteSeconds);
  return o;
}

// ------------------------------------------------------------ criterion 2

Outcome pole_safety() {
  Rng rng = Rng(2).stream("pole");
  std::size_t bad = 0, mismatched = 0;
  double min_den = INFINITY;
  std::vector<double> a(kDefaultNumOrder + 1), b(kDefaultDenOrder);
  for (std::size_t i = 0; i < kPoleDraws; ++i) {
    const double coef_scale = i % 10 == 0 ? 100.0 : 5.0;
    for (auto& v : a) v = rng.uniform(-coef_scale, coef_scale);
    for (auto& v : b) v = rng.uniform(-coef_scale, coef_scale);
    const double x = i % 7 == 0 ? rng.uniform(-1000.0, 1000.0) : rng.uniform(-10.0, 10.0);
    // Oracle: P(x) / (1 + |b1 x + ... + bn x^n|) evaluated term by term.
    long double p = 0, q = 0, xp = 1;
    for (std::size_t k = 0; k < a.size(); ++k, xp *= x) p += a[k] * xp;
    xp = x;
    for (std::size_t k = 0; k < b.size(); ++k, xp *= x) q += b[k] * xp;
    const long double den = 1 + std::fabs(q);
    min_den = std::min(min_den, static_cast<double>(den));
    const double got = safe_pade(a, b, x);
    if (!(den >= 1) || !std::isfinite(got)) ++bad;
    const long double expect = p / den;
    if (std::fabs(got - expect) > 1e-9 * std::max<long double>(1, std::fabs(expect))) ++mismatched;
  }
  return {bad == 0 && mismatched == 0,
          fmt("%zu draws, %zu with denominator < 1 or non-finite output, min denominator %.6f, "
              "%zu disagreeing with the oracle",
              kPoleDraws, bad, min_den, mismatched)};
}

// ------------------------------------------------------------ criterion 3

std::vector<double> random_direction(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return v;
}

long double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Brute-force (N + 1)-way softmax cross-entropy with the positive as target.
double nce_oracle(const std::vector<double>& a, const std::vector<double>& p,
                  const std::vector<std::vector<double>>& negs, double tau) {
  std::vector<long double> logits{cosine(a, p) / tau};
  for (const auto& n : negs) logits.push_back(cosine(a, n) / tau);
  long double denom = 0;
  for (long double l : logits) denom += std::exp(l);
  return static_cast<double>(-std::log(std::exp(logits[0]) / denom));
}

Outcome patch_nce_oracle() {
  Rng rng = Rng(3).stream("nce");
  double worst = 0;
  std::size_t samples = 0;
  for (std::size_t n : {1, 8, 63}) {
    for (std::size_t s = 0; s < kNceSamples; ++s, ++samples) {
      const std::size_t dim = 4 + rng.below(61);
      const auto a = random_direction(rng, dim), p = random_direction(rng, dim);
      std::vector<std::vector<double>> negs;
      std::vector<std::span<const double>> spans;
      for (std::size_t i = 0; i < n; ++i) negs.push_back(random_direction(rng, dim));
      for (const auto& v : negs) spans.emplace_back(v);
      worst = std::max(worst, std::abs(patch_nce_single(a, p, spans) - nce_oracle(a, p, negs, kDefaultTau)));
    }
  }
  // N = 1 symmetric: positive and negative mirror each other about the anchor.
  double worst_ln2 = 0;
  for (std::size_t s = 0; s < 1000; ++s) {
    const std::size_t dim = 3 + rng.below(30);
    auto a = random_direction(rng, dim), u = random_direction(rng, dim);
    const double proj = std::inner_product(a.begin(), a.end(), u.begin(), 0.0) /
                        std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
    for (std::size_t i = 0; i < dim; ++i) u[i] -= proj * a[i];
    std::vector<double> p(dim), n(dim);
    for (std::size_t i = 0; i < dim; ++i) p[i] = a[i] + u[i], n[i] = a[i] - u[i];
    const double got = patch_nce_single(a, p, {std::span<const double>(n)});
    worst_ln2 = std::max(worst_ln2, std::abs(got - std::log(2.0)));
  }
  return {worst < kNceOracleTol && worst_ln2 < kNceLn2Tol,
          fmt("%zu samples over N in {1, 8, 63}: max |error| %.2e (< %.0e); symmetric N=1 max "
              "|loss - ln 2| %.2e (< %.0e)",
              samples, worst, kNceOracleTol, worst_ln2, kNceLn2Tol)};
}

// ------------------------------------------------------------ criterion 4

Outcome loss_trivial_values() {
  const Tensor<double> ones({1, 1, 30, 30}, 1.0), zeros({1, 1, 30, 30}, 0.0);
  Rng rng(4);
  const auto y = random_tensor<double>({1, 3, 16, 16}, rng);
  const double adv_g = lsgan_generator_loss(ones);
  const double adv_d = lsgan_discriminator_loss(ones, zeros);
  const double ide = identity_loss(y, y);
  const double total = total_generator_loss(0.5, 0.2, 0.1);
  return {adv_g == 0 && adv_d == 0 && ide == 0 && total == 1.2,
          fmt("adversarial G at logits 1: %g; D at (1, 0): %g; identity at G(y)=y: %g; total on "
              "(0.5, 0.2, 0.1): %.17g (exactly 1.2 required)",
              adv_g, adv_d, ide, total)};
}

// ------------------------------------------------------------ criterion 5

Outcome model_audit() {
  Outcome o;
  std::vector<AuditReport> reports;
  for (char v : {'T', 'S', 'B'}) reports.push_back(audit_variant(v));
  for (const auto& r : reports) {
    const bool ok = std::abs(r.params_deviation) <= kAuditBand &&
                    std::abs(r.macs_deviation) <= kAuditBand && !r.assumptions.empty();
    o.pass = o.pass && ok;
    o.detail += fmt("%c %.3fM (%+.1f%%) %.3fG (%+.1f%%)%s; ", r.variant, r.total_params / 1e6,
                    100 * r.params_deviation, r.total_macs / 1e9, 100 * r.macs_deviation,
                    ok ? "" : " outside +/-25%");
  }
  const bool ordered = reports[0].total_params < reports[1].total_params &&
                       reports[1].total_params < reports[2].total_params &&
                       reports[0].total_macs < reports[1].total_macs &&
                       reports[1].total_macs < reports[2].total_macs;
  o.pass = o.pass && ordered;
  o.detail += fmt("ordering T < S < B %s; %zu assumptions listed", ordered ? "holds" : "violated",
                  reports[0].assumptions.size());
  return o;
}

// ------------------------------------------------------------ criterion 6

Outcome output_shapes() {
  Outcome o;
  for (char v : {'T', 'S', 'B'}) {
    Rng rng(6);
    const auto gen = make_generator<float>(variant_config(v), rng);
    for (std::size_t size : {64, 128, 256}) {
      Rng xr = rng.stream("input", size);
      const auto x = random_tensor<float>({1, 3, size, size}, xr);
      const auto y = gen.forward(x);
      const auto [lo, hi] = std::minmax_element(y.vec().begin(), y.vec().end());
      const bool ok = y.shape() == x.shape() && *lo >= -1.0f && *hi <= 1.0f;
      if (!ok) {
        o.pass = false;
        o.detail += fmt("%c@%zu gives %s in [%g, %g]; ", v, size, shape_str(y.shape()).c_str(), *lo, *hi);
      }
    }
  }
  Rng rng(6);
  const auto disc = make_discriminator<float>(rng);
  const auto map = disc.forward(random_tensor<float>({1, 3, 256, 256}, rng));
  if (o.pass) o.detail = "T/S/B generators at 64/128/256 keep the input shape within [-1, 1]; ";
  const bool disc_ok = map.shape() == Shape{1, 1, 30, 30};
  o.pass = o.pass && disc_ok;
  o.detail += "discriminator map at 256 is " + shape_str(map.shape());
  return o;
}

// ------------------------------------------------------------ criteria 7-9

struct ToyData {
  std::vector<Tensor<float>> clean, hazy, held_clean, held_hazy;
};

ToyData make_toy_data() {
  const Rng root(0);
  ToyData d;
  d.clean = make_scenes(root.stream("train"), kToyImages, kToySize);
  d.held_clean = make_scenes(root.stream("heldout"), kToyHeldOut, kToySize);
  for (std::size_t i = 0; i < d.clean.size(); ++i) {
    Rng r = root.stream("haze", i);
    d.hazy.push_back(synthesize_haze(d.clean[i], r));
  }
  for (std::size_t i = 0; i < d.held_clean.size(); ++i) {
    Rng r = root.stream("haze.heldout", i);
    d.held_hazy.push_back(quantize_8bit(synthesize_haze(d.held_clean[i], r)));
    d.held_clean[i] = quantize_8bit(d.held_clean[i]);
  }
  return d;
}

TrainConfig toy_config(const fs::path& out_dir) {
  TrainConfig cfg;
  cfg.variant = 'T';
  cfg.seed = 0;
  cfg.epochs = kToyEpochs;
  cfg.decay_start_epoch = 3;
  cfg.image_size = kToySize;
  cfg.out_dir = out_dir.string();
  cfg.checkpoint_every = 0;
  return cfg;
}

struct ToyRun {
  TrainState state;
  std::vector<StepLog> logs;
  double seconds = 0;
  std::string error;
};

ToyRun run_toy(const ToyData& d, const fs::path& out_dir) {
  ToyRun run;
  const TrainConfig cfg = toy_config(out_dir);
  run.state = init_train_state(cfg);
  UnpairedDataset data(make_domain(d.hazy, kToySize), make_domain(d.clean, kToySize),
                       Rng(cfg.seed).stream("data"), cfg.flip);
  const auto t0 = Clock::now();
  try {
    train(run.state, data, [&run](const StepLog& l) { run.logs.push_back(l); });
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  run.seconds = seconds_since(t0);
  return run;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome toy_training(const ToyData& d, const ToyRun& run) {
  const std::size_t expected_steps = kToyImages * kToyEpochs;
  bool finite = run.error.empty() && run.logs.size() == expected_steps;
  for (const auto& l : run.logs) {
    finite = finite && std::isfinite(l.adv_g) && std::isfinite(l.ide) && std::isfinite(l.pc) &&
             std::isfinite(l.total_g) && std::isfinite(l.adv_d);
  }
  std::vector<double> totals;
  for (const auto& l : run.logs) totals.push_back(l.total_g);
  double first = NAN, last = NAN;
  if (totals.size() >= 2 * kMedianWindow) {
    first = median({totals.begin(), totals.begin() + kMedianWindow});
    last = median({totals.end() - kMedianWindow, totals.end()});
  }
  double hazy_psnr = 0, dehazed_psnr = 0;
  for (std::size_t i = 0; i < d.held_hazy.size(); ++i) {
    const auto out = quantize_8bit(restore_image(run.state.model.gen, d.held_hazy[i]));
    hazy_psnr += psnr(d.held_hazy[i], d.held_clean[i]);
    dehazed_psnr += psnr(out, d.held_clean[i]);
  }
  hazy_psnr /= static_cast<double>(d.held_hazy.size());
  dehazed_psnr /= static_cast<double>(d.held_hazy.size());
  const bool a = finite, b = last < first, c = dehazed_psnr - hazy_psnr >= kToyPsnrGainDb;
  const bool fast = run.seconds < kToyMinutes * 60;
  return {a && b && c && fast,
          fmt("(a) %zu steps %s%s; (b) median total_g first %zu %.4f, last %zu %.4f; (c) held-out "
              "PSNR hazy %.2f dB, dehazed %.2f dB, gain %+.2f dB (>= %.0f); %.1f min (< %.0f)",
              run.logs.size(), finite ? "all finite" : "NON-FINITE OR ABORTED",
              run.error.empty() ? "" : (": " + run.error).c_str(), kMedianWindow, first,
              kMedianWindow, last, hazy_psnr, dehazed_psnr, dehazed_psnr - hazy_psnr,
              kToyPsnrGainDb, run.seconds / 60, kToyMinutes)};
}

Outcome determinism(const ToyData& d, const fs::path& first_log) {
  const auto dir = scratch("toy_repeat");
  const ToyRun again = run_toy(d, dir);
  const std::string a = file_bytes(first_log), b = file_bytes(dir / "train_log.csv");
  const bool same = !a.empty() && a == b && again.error.empty();
  return {same, fmt("train_log.csv of two seed-0 runs: %zu and %zu bytes, %s", a.size(), b.size(),
                    same ? "byte-identical" : "DIFFERENT")};
}

Outcome metrics_and_checkpoint(ToyRun& run) {
  Rng rng(9);
  const auto x = make_scene(rng, 64);
  const double s = ssim(x, x);
  Tensor<double> gt({3, 32, 32}, 0.4), pred = gt;
  for (auto& v : pred.vec()) v += 0.1;
  const double p = psnr(pred, gt);

  const auto dir = scratch("checkpoint");
  save_train_state(run.state, dir);
  TrainState loaded = load_train_state(dir);
  bool exact = loaded.step == run.state.step && loaded.epoch == run.state.epoch &&
               loaded.rng.counter() == run.state.rng.counter();
  std::size_t tensors = 0;
  const auto compare = [&](const ParamRefs<float>& a, const ParamRefs<float>& b) {
    exact = exact && a.size() == b.size();
    for (std::size_t i = 0; exact && i < a.size(); ++i, ++tensors) {
      exact = bitwise_equal(a[i]->value, b[i]->value);
    }
  };
  compare(run.state.model.generator_side_params(), loaded.model.generator_side_params());
  compare(run.state.model.disc.params(), loaded.model.disc.params());
  for (std::size_t i = 0; exact && i < run.state.opt_g.m.size(); ++i) {
    exact = bitwise_equal(run.state.opt_g.m[i], loaded.opt_g.m[i]) &&
            bitwise_equal(run.state.opt_g.v[i], loaded.opt_g.v[i]);
  }
  const auto probe = batch_of({to_signed(x)});
  exact = exact && bitwise_equal(run.state.model.gen.forward(probe), loaded.model.gen.forward(probe));
  const bool ok = s == 1.0 && std::abs(p - 20.0) < kPsnrTol && exact;
  return {ok, fmt("ssim(x, x) = %.17g; PSNR at uniform error 0.1 = %.12f dB (|diff| %.1e < %.0e); "
                  "checkpoint round trip of %zu tensors plus optimiser state %s",
                  s, p, std::abs(p - 20.0), kPsnrTol, tensors, exact ? "bit-exact" : "NOT bit-exact")};
}

// ------------------------------------------------------------ criterion 10

Outcome ablation_axes(const ToyData& d) {
  Outcome o;
  BlockConfig bc = variant_config('T').block;
  bc.channels = 4 * variant_config('T').ngf;
  Rng r1(10), r2(10);
  bc.grkan_stack = 2;
  const auto dual = make_kat_block<float>(bc, r1);
  const auto two = make_kat_block<float>(bc, r2);
  Rng xr(11);
  const auto x = random_tensor<float>({1, bc.channels, 16, 16}, xr);
  const bool bitwise = bitwise_equal(n_grkan_forward(x, two), dual_grkan_forward(x, dual));
  o.pass = bitwise;
  o.detail = fmt("n_grkan n=2 %s Dual", bitwise ? "bitwise equal to" : "DIFFERS from");
  for (const char* mixer : {"identity", "mlp", "attention", "grkan"}) {
    TrainConfig cfg = toy_config("");
    cfg.token_mixer = mixer;
    cfg.channel_mixer = mixer;
    std::string status = "ok";
    try {
      TrainState s = init_train_state(cfg);
      for (std::size_t i = 0; i < kMixerSteps; ++i) {
        const auto hz = batch_of({to_signed(d.hazy[i])});
        const auto cl = batch_of({to_signed(d.clean[(i + 7) % d.clean.size()])});
        const auto log = train_step(s, hz, cl);
        if (!std::isfinite(log.total_g) || !std::isfinite(log.adv_d)) throw NumericError("non-finite loss");
      }
    } catch (const std::exception& e) {
      status = std::string("ERROR ") + e.what();
      o.pass = false;
    }
    o.detail += fmt("; %s mixers %zu steps %s", mixer, kMixerSteps, status.c_str());
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  const auto want = [&](int c) { return selected.empty() || selected.count(c) > 0; };

  int failures = 0;
  const auto report = [&failures](int c, const char* name, const Outcome& o) {
    if (!o.pass) ++failures;
    std::printf("criterion %2d %-26s %s  %s\n", c, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  };
  const auto guarded = [&](int c, const char* name, const std::function<Outcome()>& fn) {
    try {
      report(c, name, fn());
    } catch (const std::exception& e) {
      report(c, name, {false, std::string("threw: ") + e.what()});
    }
  };

  if (want(1)) guarded(1, "gradient suite", gradient_suite);
  if (want(2)) guarded(2, "pole safety", pole_safety);
  if (want(3)) guarded(3, "PatchNCE oracle", patch_nce_oracle);
  if (want(4)) guarded(4, "loss trivial values", loss_trivial_values);
  if (want(5)) guarded(5, "model audit", model_audit);
  if (want(6)) guarded(6, "output shapes and range", output_shapes);

  if (want(7) || want(8) || want(9) || want(10)) {
    const ToyData data = make_toy_data();
    if (want(7) || want(8) || want(9)) {
      const auto dir = scratch("toy");
      ToyRun run = run_toy(data, dir);
      if (want(7)) guarded(7, "toy training", [&] { return toy_training(data, run); });
      if (want(8)) guarded(8, "determinism", [&] { return determinism(data, dir / "train_log.csv"); });
      if (want(9)) guarded(9, "metrics and checkpoint", [&] { return metrics_and_checkpoint(run); });
    }
    if (want(10)) guarded(10, "ablation axes", [&] { return ablation_axes(data); });
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
