#pragma once

// Synthetic haze and the unpaired two-domain dataset.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "uidkat/image.hpp"
#include "uidkat/rng.hpp"

namespace uidkat {

struct HazeParams {
  double t = 1.0;  // transmission, (0, 1]
  double A = 1.0;  // airlight, [0.7, 1]
};

inline constexpr double kHazeTMin = 0.4, kHazeTMax = 0.8;
inline constexpr double kAirlightMin = 0.7, kAirlightMax = 1.0;

/// t ~ U[0.4, 0.8], A ~ U[0.7, 1.0], drawn in that order.
HazeParams draw_haze(Rng& rng);

/// I = J t + A (1 - t) per pixel. J in [0, 1]; throws ShapeError on a range violation.
Tensor<float> synthesize_haze(const Tensor<float>& clean, const HazeParams& p);
Tensor<float> synthesize_haze(const Tensor<float>& clean, Rng& rng);

/// Hazes every image of `clean_dir` into `out_dir` as PNG (same basename, .png),
/// drawing image i's parameters from rng.stream("haze", i). Also writes
/// haze_params.csv (name,t,A). Returns the number of images written.
std::size_t synthesize_haze_folder(const std::filesystem::path& clean_dir,
                                   const std::filesystem::path& out_dir, const Rng& rng);

using WarningSink = std::function<void(const std::string&)>;

/// Images of one domain, decoded, resized to size x size and scaled to [-1, 1].
struct Domain {
  std::vector<std::string> names;
  std::vector<Tensor<float>> images;  // (3, size, size)

  std::size_t size() const { return images.size(); }
};

/// Loads every PNG/JPEG of `dir`. Undecodable files are reported to `warn` and
/// skipped; throws IoError when the folder is empty or nothing decodes.
Domain load_domain(const std::filesystem::path& dir, std::size_t image_size,
                   const WarningSink& warn = {});

/// Builds a domain from in-memory images in [0, 1], resizing as needed.
Domain make_domain(const std::vector<Tensor<float>>& unit_images, std::size_t image_size);

/// Unpaired (hazy, clean) draws. Each epoch shuffles both domains
/// independently with rng.stream("shuffle.hazy"/"shuffle.clean", epoch); the
/// epoch length is the larger domain and the smaller one wraps around.
class UnpairedDataset {
 public:
  UnpairedDataset(Domain hazy, Domain clean, const Rng& rng, bool flip = false);

  std::size_t epoch_length() const;
  /// Sets the shuffles for `epoch`.
  void begin_epoch(std::size_t epoch);
  /// Draw i of the current epoch: ((3, S, S) hazy, (3, S, S) clean), with
  /// optional horizontal flips drawn from rng.stream("flip", epoch).
  std::pair<Tensor<float>, Tensor<float>> get(std::size_t i) const;
  /// Domain indices of draw i of the current epoch.
  std::pair<std::size_t, std::size_t> indices(std::size_t i) const;

  const Domain& hazy() const { return hazy_; }
  const Domain& clean() const { return clean_; }

 private:
  Domain hazy_, clean_;
  Rng rng_;
  bool flip_;
  std::vector<std::size_t> hazy_order_, clean_order_;
  std::vector<unsigned char> flips_;
};

/// Horizontal mirror of (C, H, W).
Tensor<float> flip_horizontal(const Tensor<float>& img);

}  // namespace uidkat
