// uidkat command-line interface. Exit codes: 0 success, 1 usage error,
// 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uidkat/checkpoint.hpp"
#include "uidkat/data.hpp"
#include "uidkat/eval.hpp"
#include "uidkat/gradsuite.hpp"
#include "uidkat/training.hpp"

namespace fs = std::filesystem;
using namespace uidkat;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Usage problems detected after parsing (bad config values, conflicting flags).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training flags and the config keys they set; values are applied after the
// config file so flags take precedence.
const std::vector<std::pair<std::string, std::string>> kTrainFlags = {
    {"variant", "variant"},
    {"epochs", "epochs"},
    {"decay-start-epoch", "decay_start_epoch"},
    {"lr", "lr"},
    {"beta1", "beta1"},
    {"beta2", "beta2"},
    {"batch-size", "batch_size"},
    {"image-size", "image_size"},
    {"lambda-adv", "lambda_adv"},
    {"lambda-ide", "lambda_ide"},
    {"lambda-nce", "lambda_nce"},
    {"tau", "tau"},
    {"nce-locations", "nce_locations"},
    {"detach-keys", "detach_keys"},
    {"seed", "seed"},
    {"hazy", "hazy_dir"},
    {"clean", "clean_dir"},
    {"out", "out_dir"},
    {"checkpoint-every", "checkpoint_every"},
    {"max-steps", "max_steps"},
    {"flip", "flip"},
    {"token-mixer", "token_mixer"},
    {"channel-mixer", "channel_mixer"},
    {"grkan-stack", "grkan_stack"},
    {"patch-size", "patch_size"},
    {"encoder-activation", "encoder_activation"},
    {"skip-mode", "skip_mode"},
};

void print_step(const StepLog& log) {
  if (log.step % 50 != 0) return;
  std::printf("step %llu epoch %zu lr %.3g total_g %.4f adv_d %.4f\n",
              static_cast<unsigned long long>(log.step), log.epoch, log.lr, log.total_g, log.adv_d);
  std::fflush(stdout);
}

int run_train(const std::optional<std::string>& config_path, const std::optional<std::string>& resume,
              const std::map<std::string, std::string>& flags) {
  TrainState state;
  if (resume) {
    for (const auto& [key, value] : flags) {
      if (key != "out_dir" && key != "max_steps") {
        throw UsageError("--resume continues the saved configuration; only --out and --max-steps may be given");
      }
    }
    if (config_path) throw UsageError("--resume cannot be combined with --config");
    state = load_train_state(*resume);
    try {
      for (const auto& [key, value] : flags) state.cfg.set(key, value);
    } catch (const ShapeError& e) {
      throw UsageError(e.what());
    }
  } else {
    TrainConfig cfg;
    try {
      if (config_path) cfg = load_config_file(*config_path);
      for (const auto& [key, value] : flags) cfg.set(key, value);
      cfg.validate();
    } catch (const ShapeError& e) {
      throw UsageError(e.what());
    }
    if (cfg.hazy_dir.empty() || cfg.clean_dir.empty()) {
      throw UsageError("train needs --hazy and --clean (or hazy_dir / clean_dir in the config)");
    }
    state = init_train_state(cfg);
  }
  const TrainConfig& cfg = state.cfg;
  const auto warn = [](const std::string& msg) { std::fprintf(stderr, "warning: %s\n", msg.c_str()); };
  UnpairedDataset data(load_domain(cfg.hazy_dir, cfg.image_size, warn),
                       load_domain(cfg.clean_dir, cfg.image_size, warn),
                       Rng(cfg.seed).stream("data"), cfg.flip);
  std::printf("training variant %c on %zu steps per epoch, epochs %zu..%zu\n", cfg.variant,
              data.epoch_length(), state.epoch, cfg.epochs);
  train(state, data, print_step);
  std::printf("done: %llu steps, checkpoint in %s\n", static_cast<unsigned long long>(state.step),
              (fs::path(cfg.out_dir) / "checkpoint").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UID-KAT unpaired image dehazing"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a generator on unpaired hazy/clean folders");
  std::optional<std::string> config_path, resume;
  std::map<std::string, std::string> train_values;
  train_cmd->add_option("--config", config_path, "Flat key = value config file");
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint directory");
  for (const auto& [flag, key] : kTrainFlags) {
    train_cmd->add_option("--" + flag, train_values[key], "Sets " + key);
  }

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Restore images with a trained generator");
  std::string infer_ckpt, infer_out;
  std::vector<std::string> infer_inputs;
  std::size_t max_pixels = kDefaultMaxPixels;
  infer_cmd->add_option("--checkpoint", infer_ckpt, "Generator checkpoint directory")->required();
  infer_cmd->add_option("--input", infer_inputs, "Image files or directories")->required();
  infer_cmd->add_option("--out", infer_out, "Output directory")->required();
  infer_cmd->add_option("--max-pixels", max_pixels, "Reject larger inputs")->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of predictions against ground truth");
  std::string eval_pred, eval_gt, eval_csv, eval_channels = "luma";
  eval_cmd->add_option("--pred", eval_pred, "Prediction directory")->required();
  eval_cmd->add_option("--gt", eval_gt, "Ground-truth directory")->required();
  eval_cmd->add_option("--out", eval_csv, "CSV path (stdout when omitted)");
  eval_cmd->add_option("--channels", eval_channels, "SSIM channels")
      ->check(CLI::IsMember({"luma", "rgb"}))
      ->capture_default_str();

  // audit
  auto* audit_cmd = app.add_subcommand("audit", "Parameter and MAC audit against reference figures");
  std::string audit_variant_name = "T";
  std::size_t audit_size = 256;
  bool audit_json = false, audit_aux = false;
  audit_cmd->add_option("--variant", audit_variant_name, "T, S or B")
      ->check(CLI::IsMember({"T", "S", "B", "t", "s", "b"}))
      ->capture_default_str();
  audit_cmd->add_option("--input-size", audit_size, "Square input side")->capture_default_str();
  audit_cmd->add_flag("--json", audit_json, "Emit JSON");
  audit_cmd->add_flag("--auxiliary", audit_aux, "Add discriminator and projection heads");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite in double precision");
  std::uint64_t grad_seed = 0;
  grad_cmd->add_option("--seed", grad_seed, "Shape and value seed")->capture_default_str();

  // synth-haze
  auto* haze_cmd = app.add_subcommand("synth-haze", "Apply atmospheric-scattering haze to clean images");
  std::string haze_clean, haze_out;
  std::uint64_t haze_seed = 0;
  haze_cmd->add_option("--clean", haze_clean, "Clean image directory")->required();
  haze_cmd->add_option("--out", haze_out, "Output directory")->required();
  haze_cmd->add_option("--seed", haze_seed, "Haze parameter seed")->capture_default_str();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Generator forward-pass timing");
  std::optional<std::string> bench_ckpt;
  std::string bench_variant = "T";
  std::size_t bench_size = 256, bench_repeats = 10, bench_warmup = kBenchWarmup;
  bench_cmd->add_option("--checkpoint", bench_ckpt, "Generator checkpoint (random weights when omitted)");
  bench_cmd->add_option("--variant", bench_variant, "Variant for random weights")
      ->check(CLI::IsMember({"T", "S", "B", "t", "s", "b"}))
      ->capture_default_str();
  bench_cmd->add_option("--input-size", bench_size, "Square input side")->capture_default_str();
  bench_cmd->add_option("--repeats", bench_repeats, "Timed repeats")->capture_default_str();
  bench_cmd->add_option("--warmup", bench_warmup, "Untimed warmup passes")
      ->check(CLI::Range(std::size_t{kBenchWarmup}, std::size_t{1000}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) {
      std::map<std::string, std::string> flags;
      for (const auto& [flag, key] : kTrainFlags) {
        if (train_cmd->count("--" + flag) > 0) flags[key] = train_values[key];
      }
      return run_train(config_path, resume, flags);
    }
    if (*infer_cmd) {
      const Generator<float> gen = load_generator(infer_ckpt);
      std::vector<fs::path> paths(infer_inputs.begin(), infer_inputs.end());
      const auto inputs = expand_inputs(paths);
      if (inputs.empty()) throw IoError("no input images found");
      for (const auto& p : infer_files(gen, inputs, infer_out, max_pixels)) std::printf("%s\n", p.string().c_str());
      return 0;
    }
    if (*eval_cmd) {
      const auto mode = eval_channels == "rgb" ? SsimChannels::kRgbMean : SsimChannels::kLuma;
      const auto result = eval_folder(eval_pred, eval_gt, mode);
      if (eval_csv.empty()) {
        write_eval_csv(std::cout, result);
      } else {
        std::ofstream out(eval_csv);
        write_eval_csv(out, result);
        if (!out) throw IoError("cannot write '" + eval_csv + "'");
        std::printf("mean psnr %.4f dB, mean ssim %.4f\n", result.mean.psnr_db, result.mean.ssim);
      }
      return 0;
    }
    if (*audit_cmd) {
      const auto report = audit_variant(audit_variant_name[0], audit_size, audit_aux);
      if (audit_json) {
        std::cout << to_json(report).dump(2) << '\n';
      } else {
        print_audit(std::cout, report);
      }
      return 0;
    }
    if (*grad_cmd) {
      bool ok = true;
      const auto cases = run_gradient_suite(grad_seed, [&ok](const GradSuiteCase& c) {
        ok = ok && c.report.passed;
        std::printf("%-28s %-8s max rel %.3e (tol %.0e)%s%s\n", c.name.c_str(),
                    c.composed ? "composed" : "single", c.report.max_rel_error(), c.report.tolerance,
                    c.report.passed ? "  ok" : "  FAIL: ", c.report.failure.c_str());
        std::fflush(stdout);
      });
      std::printf("%zu cases, %s\n", cases.size(), ok ? "all passed" : "FAILURES");
      return ok ? 0 : kExitRuntime;
    }
    if (*haze_cmd) {
      const std::size_t n = synthesize_haze_folder(haze_clean, haze_out, Rng(haze_seed));
      std::printf("wrote %zu hazy images and haze_params.csv to %s\n", n, haze_out.c_str());
      return 0;
    }
    if (*bench_cmd) {
      Generator<float> gen;
      if (bench_ckpt) {
        gen = load_generator(*bench_ckpt);
      } else {
        Rng rng(0);
        gen = make_generator<float>(variant_config(bench_variant[0]), rng);
      }
      const auto r = bench_generator(gen, bench_size, bench_repeats, bench_warmup);
      std::printf("size %zu repeats %zu warmup %zu threads %zu build %s\n", bench_size,
                  r.seconds.size(), r.warmup, r.threads, r.build.c_str());
      std::printf("mean %.6f s median %.6f s\n", r.mean, r.median);
      return 0;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
