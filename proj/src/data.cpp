#include "uidkat/data.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>

namespace uidkat {

namespace fs = std::filesystem;

HazeParams draw_haze(Rng& rng) {
  HazeParams p;
  p.t = rng.uniform(kHazeTMin, kHazeTMax);
  p.A = rng.uniform(kAirlightMin, kAirlightMax);
  return p;
}

Tensor<float> synthesize_haze(const Tensor<float>& clean, const HazeParams& p) {
  if (!(p.t > 0.0 && p.t <= 1.0)) {
    throw ShapeError("synthesize_haze: transmission t = " + std::to_string(p.t) +
                     " outside (0, 1]");
  }
  if (!(p.A >= kAirlightMin && p.A <= kAirlightMax)) {
    throw ShapeError("synthesize_haze: airlight A = " + std::to_string(p.A) +
                     " outside [0.7, 1]");
  }
  Tensor<float> out = clean;
  for (auto& v : out.vec()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ShapeError("synthesize_haze: clean image outside [0, 1]");
    v = static_cast<float>(v * p.t + p.A * (1.0 - p.t));
  }
  return out;
}

Tensor<float> synthesize_haze(const Tensor<float>& clean, Rng& rng) {
  return synthesize_haze(clean, draw_haze(rng));
}

std::size_t synthesize_haze_folder(const fs::path& clean_dir, const fs::path& out_dir,
                                   const Rng& rng) {
  const auto files = list_images(clean_dir);
  if (files.empty()) throw IoError("no PNG/JPEG images in '" + clean_dir.string() + "'");
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "haze_params.csv");
  log << "name,t,A\n" << std::setprecision(17);
  for (std::size_t i = 0; i < files.size(); ++i) {
    Rng r = rng.stream("haze", i);
    const HazeParams p = draw_haze(r);
    const auto name = files[i].stem().string() + ".png";
    write_png(out_dir / name, synthesize_haze(read_image(files[i]), p));
    log << name << ',' << p.t << ',' << p.A << '\n';
  }
  return files.size();
}

Domain load_domain(const fs::path& dir, std::size_t image_size, const WarningSink& warn) {
  const auto files = list_images(dir);
  if (files.empty()) throw IoError("no PNG/JPEG images in '" + dir.string() + "'");
  Domain d;
  for (const auto& f : files) {
    try {
      d.images.push_back(to_signed(resize_bilinear(read_image(f), image_size, image_size)));
      d.names.push_back(f.filename().string());
    } catch (const IoError& e) {
      if (warn) warn(std::string("skipping undecodable image: ") + e.what());
    }
  }
  if (d.images.empty()) {
    throw IoError("none of the " + std::to_string(files.size()) + " images in '" + dir.string() +
                  "' could be decoded");
  }
  return d;
}

Domain make_domain(const std::vector<Tensor<float>>& unit_images, std::size_t image_size) {
  if (unit_images.empty()) throw IoError("make_domain: no images");
  Domain d;
  for (std::size_t i = 0; i < unit_images.size(); ++i) {
    d.images.push_back(to_signed(resize_bilinear(unit_images[i], image_size, image_size)));
    d.names.push_back(std::to_string(i));
  }
  return d;
}

Tensor<float> flip_horizontal(const Tensor<float>& img) {
  if (img.rank() != 3) throw ShapeError("flip_horizontal: expected (C, H, W)");
  Tensor<float> out = img;
  const std::size_t W = img.dim(2), rows = img.numel() / W;
  for (std::size_t r = 0; r < rows; ++r) std::reverse(out.data() + r * W, out.data() + (r + 1) * W);
  return out;
}

UnpairedDataset::UnpairedDataset(Domain hazy, Domain clean, const Rng& rng, bool flip)
    : hazy_(std::move(hazy)), clean_(std::move(clean)), rng_(rng), flip_(flip) {
  if (hazy_.size() == 0 || clean_.size() == 0) throw IoError("unpaired dataset: empty domain");
  begin_epoch(0);
}

std::size_t UnpairedDataset::epoch_length() const {
  return std::max(hazy_.size(), clean_.size());
}

void UnpairedDataset::begin_epoch(std::size_t epoch) {
  Rng rh = rng_.stream("shuffle.hazy", epoch), rc = rng_.stream("shuffle.clean", epoch);
  hazy_order_ = rh.permutation(hazy_.size());
  clean_order_ = rc.permutation(clean_.size());
  flips_.assign(2 * epoch_length(), 0);
  if (flip_) {
    Rng rf = rng_.stream("flip", epoch);
    for (auto& f : flips_) f = static_cast<unsigned char>(rf.below(2));
  }
}

std::pair<std::size_t, std::size_t> UnpairedDataset::indices(std::size_t i) const {
  if (i >= epoch_length()) throw ShapeError("unpaired dataset: draw index out of range");
  return {hazy_order_[i % hazy_.size()], clean_order_[i % clean_.size()]};
}

std::pair<Tensor<float>, Tensor<float>> UnpairedDataset::get(std::size_t i) const {
  const auto [h, c] = indices(i);
  Tensor<float> x = hazy_.images[h], y = clean_.images[c];
  if (flips_[2 * i]) x = flip_horizontal(x);
  if (flips_[2 * i + 1]) y = flip_horizontal(y);
  return {std::move(x), std::move(y)};
}

}  // namespace uidkat
