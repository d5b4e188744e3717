#pragma once

// Image-quality metrics, folder evaluation, the parameter/MAC audit,
// arbitrary-size inference and the runtime benchmark.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uidkat/networks.hpp"

namespace uidkat {

// ---------------------------------------------------------------- metrics

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(max^2 / MSE); +inf when MSE is 0. Throws ShapeError on shape mismatch.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& gt, double max_value = 1.0);

enum class SsimChannels { kLuma, kRgbMean };

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Mean SSIM over every valid 11x11 Gaussian window (sigma 1.5) with
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2, L = 1. Inputs are (C, H, W) or
/// (1, C, H, W); 3-channel images are converted to luma 0.299R + 0.587G +
/// 0.114B unless kRgbMean averages per-channel SSIM. Throws ShapeError when
/// the image is smaller than the window.
template <typename T>
double ssim(const Tensor<T>& pred, const Tensor<T>& gt, SsimChannels mode = SsimChannels::kLuma);

struct EvalRow {
  std::string name;
  double psnr_db = 0;
  double ssim = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;  // lexicographic by name
  EvalRow mean;               // name "mean"
};

/// Pairs files by basename. Images are 8-bit so metrics are on the 8-bit
/// grid. Throws IoError naming a prediction without its ground truth.
EvalResult eval_folder(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       SsimChannels mode = SsimChannels::kLuma);

/// Header `name,psnr_db,ssim`, one row per image, then the mean row.
void write_eval_csv(std::ostream& out, const EvalResult& result);

// ---------------------------------------------------------------- audit

struct AuditPart {
  std::string name;
  std::size_t params = 0;
  std::uint64_t macs = 0;
};

struct AuditReference {
  double params_m = 0;
  double macs_g = 0;
};

/// Published reference figures for 'T', 'S', 'B'; throws ShapeError otherwise.
AuditReference table_reference(char variant);

struct AuditReport {
  char variant = 'T';
  std::size_t input_size = 256;
  bool includes_auxiliary = false;  // discriminator and projection heads added
  std::vector<AuditPart> parts;
  std::size_t total_params = 0;
  std::uint64_t total_macs = 0;
  AuditReference reference;
  double params_deviation = 0;  // (measured - reference) / reference
  double macs_deviation = 0;
  std::vector<std::string> assumptions;
  /// Totals of the same configuration with the other skip merge.
  std::string other_skip_mode;
  std::size_t other_params = 0;
  std::uint64_t other_macs = 0;
};

AuditReport audit_model(const GeneratorConfig& cfg, std::size_t input_size = 256,
                        bool include_auxiliary = false);
AuditReport audit_variant(char variant, std::size_t input_size = 256,
                          bool include_auxiliary = false);

void print_audit(std::ostream& out, const AuditReport& report);
nlohmann::json to_json(const AuditReport& report);

// ---------------------------------------------------------------- inference

inline constexpr std::size_t kDefaultMaxPixels = 4096 * 4096;

/// (3, H, W) in [0, 1] -> restored (3, H, W) in [0, 1]. Reflect-pads to the
/// next multiple of 16 and crops back. Throws ShapeError above `max_pixels`.
Tensor<float> restore_image(const Generator<float>& gen, const Tensor<float>& unit_image,
                            std::size_t max_pixels = kDefaultMaxPixels);

/// Restores each input to out_dir/<stem>.png. Returns the written paths.
std::vector<std::filesystem::path> infer_files(const Generator<float>& gen,
                                               const std::vector<std::filesystem::path>& inputs,
                                               const std::filesystem::path& out_dir,
                                               std::size_t max_pixels = kDefaultMaxPixels);

/// Expands directories to their images (sorted) and keeps files as given.
std::vector<std::filesystem::path> expand_inputs(const std::vector<std::filesystem::path>& paths);

// ---------------------------------------------------------------- bench

inline constexpr std::size_t kBenchWarmup = 3;

struct BenchResult {
  std::vector<double> seconds;  // one per timed repeat
  double mean = 0;
  double median = 0;
  std::size_t warmup = kBenchWarmup;
  std::size_t threads = 1;
  std::string build;
};

/// Times `repeats` forward passes on a (1, 3, size, size) input after `warmup` untimed ones.
BenchResult bench_generator(const Generator<float>& gen, std::size_t size, std::size_t repeats,
                            std::size_t warmup = kBenchWarmup);

/// Mean and median of the samples (median of an even count averages the middle pair).
void summarize(BenchResult& r);

}  // namespace uidkat
