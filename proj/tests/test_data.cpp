#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "support/scenes.hpp"
#include "support/test_util.hpp"
#include "uidkat/data.hpp"
#include "uidkat/image.hpp"

#include <jpeglib.h>

using namespace uidkat;
using namespace uidkat::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uidkat_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Minimal libjpeg encoder for a uniform colour.
void write_solid_jpeg(const fs::path& path, int w, int h, int r, int g, int b) {
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr err{};
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 95, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int x = 0; x < w; ++x) row[3 * x] = r, row[3 * x + 1] = g, row[3 * x + 2] = b;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW p = row.data();
    jpeg_write_scanlines(&cinfo, &p, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

Tensor<float> solid(std::size_t h, std::size_t w, float r, float g, float b) {
  Tensor<float> t({3, h, w});
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i) t[i] = r, t[n + i] = g, t[2 * n + i] = b;
  return t;
}

}  // namespace

TEST_CASE("PNG round trip is exact on the 8-bit grid") {
  const auto dir = scratch_dir("png");
  Rng rng(1);
  const auto img = quantize_8bit(random_tensor<float>({3, 9, 13}, rng, 0.0, 1.0));
  write_png(dir / "a.png", img);
  const auto back = read_image(dir / "a.png");
  REQUIRE(back.shape() == img.shape());
  CHECK(bitwise_equal(back, img));
}

TEST_CASE("solid gray 128 decodes to 128/127.5 - 1 in signed range") {
  const auto dir = scratch_dir("gray");
  write_png(dir / "g.png", solid(4, 4, 128 / 255.0f, 128 / 255.0f, 128 / 255.0f));
  const auto s = to_signed(read_image(dir / "g.png"));
  for (float v : s.vec()) CHECK(v == doctest::Approx(128.0 / 127.5 - 1.0).epsilon(1e-6));
  CHECK(s[0] == doctest::Approx(0.0039).epsilon(0.01));
}

TEST_CASE("JPEG decoding and magic-byte dispatch") {
  const auto dir = scratch_dir("jpeg");
  write_solid_jpeg(dir / "g.jpg", 8, 8, 200, 120, 40);
  const auto img = read_image(dir / "g.jpg");
  REQUIRE(img.shape() == Shape{3, 8, 8});
  const float expect[3] = {200, 120, 40};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(img[c * 64 + i] * 255 - expect[c]) <= 3.0f);

  std::ofstream(dir / "junk.png") << "not an image";
  CHECK_THROWS_AS(read_image(dir / "junk.png"), IoError);
  CHECK_THROWS_AS(read_image(dir / "missing.png"), IoError);
}

TEST_CASE("list_images filters extensions and sorts by name") {
  const auto dir = scratch_dir("list");
  for (const char* n : {"b.PNG", "a.jpg", "c.jpeg", "notes.txt"}) std::ofstream(dir / n) << "x";
  const auto files = list_images(dir);
  REQUIRE(files.size() == 3);
  CHECK(files[0].filename() == "a.jpg");
  CHECK(files[1].filename() == "b.PNG");
  CHECK(files[2].filename() == "c.jpeg");
  CHECK_THROWS_AS(list_images(dir / "nope"), IoError);
}

TEST_CASE("bilinear resize: identity, constants and a hand-computed 2x2 -> 4x4 row") {
  Rng rng(2);
  const auto img = random_tensor<float>({3, 5, 7}, rng, 0, 1);
  CHECK(bitwise_equal(resize_bilinear(img, 5, 7), img));
  const auto c = resize_bilinear(solid(6, 6, 0.25f, 0.5f, 0.75f), 16, 10);
  for (std::size_t i = 0; i < 160; ++i) CHECK(c[i] == 0.25f);

  // Half-pixel centres: output x maps to (x + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25.
  Tensor<float> two({1, 2, 2}, std::vector<float>{0, 1, 0, 1});
  const auto up = resize_bilinear(two, 2, 4);
  const std::vector<float> row{0.0f, 0.25f, 0.75f, 1.0f};
  for (std::size_t x = 0; x < 4; ++x) CHECK(up[x] == doctest::Approx(row[x]));
}

TEST_CASE("reflect_pad_to and crop invert each other") {
  Rng rng(3);
  const auto img = random_tensor<float>({3, 10, 9}, rng);
  const auto p = reflect_pad_to(img, 16, 16);
  REQUIRE(p.shape() == Shape{3, 16, 16});
  CHECK(bitwise_equal(crop(p, 10, 9), img));
  // Row 10 mirrors row 8, column 9 mirrors column 7.
  CHECK(p[10 * 16 + 0] == img[8 * 9 + 0]);
  CHECK(p[0 * 16 + 9] == img[0 * 9 + 7]);
  CHECK_THROWS_AS(reflect_pad_to(img, 8, 9), ShapeError);
  CHECK_THROWS_AS(reflect_pad_to(img, 32, 9), ShapeError);
}

TEST_CASE("haze model: trivial cases and algebraic inversion") {
  Rng rng(4);
  const auto J = random_tensor<float>({3, 6, 6}, rng, 0, 1);
  CHECK(bitwise_equal(synthesize_haze(J, {1.0, 0.8}), J));
  const auto half = synthesize_haze(Tensor<float>({3, 4, 4}), {0.5, 1.0});
  for (float v : half.vec()) CHECK(v == 0.5f);

  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const HazeParams p = draw_haze(rng);
    CHECK(p.t >= 0.4);
    CHECK(p.t <= 0.8);
    CHECK(p.A >= 0.7);
    CHECK(p.A <= 1.0);
    const auto I = synthesize_haze(J, p);
    for (std::size_t i = 0; i < J.numel(); ++i) {
      const double rec = (I[i] - p.A * (1 - p.t)) / p.t;
      worst = std::max(worst, std::abs(rec - J[i]));
    }
  }
  // float storage of I bounds the inversion error by a few ulps of 1 / t.
  CHECK(worst < 1e-6);

  CHECK_THROWS_AS(synthesize_haze(J, {0.0, 0.8}), ShapeError);
  CHECK_THROWS_AS(synthesize_haze(J, {1.2, 0.8}), ShapeError);
  CHECK_THROWS_AS(synthesize_haze(J, {0.5, 0.5}), ShapeError);
  Tensor<float> out_of_range({3, 2, 2}, 1.5f);
  CHECK_THROWS_AS(synthesize_haze(out_of_range, {0.5, 0.8}), ShapeError);
}

TEST_CASE("synthesize_haze_folder is reproducible") {
  const auto clean = scratch_dir("synth_clean");
  Rng rng(5);
  for (int i = 0; i < 3; ++i) write_png(clean / ("c" + std::to_string(i) + ".png"), make_scene(rng, 24));
  const auto a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  CHECK(synthesize_haze_folder(clean, a, Rng(3)) == 3);
  CHECK(synthesize_haze_folder(clean, b, Rng(3)) == 3);
  for (const auto& f : list_images(a)) {
    CHECK(bitwise_equal(read_image(f), read_image(b / f.filename())));
  }
  CHECK(fs::exists(a / "haze_params.csv"));
}

TEST_CASE("unpaired dataset: epoch length, wrap-around and independent shuffles") {
  std::vector<Tensor<float>> h, c;
  for (int i = 0; i < 3; ++i) h.push_back(solid(16, 16, i / 10.0f, 0, 0));
  for (int i = 0; i < 5; ++i) c.push_back(solid(16, 16, 0, i / 10.0f, 0));
  UnpairedDataset ds(make_domain(h, 16), make_domain(c, 16), Rng(7));
  CHECK(ds.epoch_length() == 5);
  std::vector<int> hazy_hits(3), clean_hits(5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto [hi, ci] = ds.indices(i);
    ++hazy_hits[hi];
    ++clean_hits[ci];
  }
  for (int v : clean_hits) CHECK(v == 1);
  for (int v : hazy_hits) CHECK(v >= 1);
  CHECK_THROWS_AS(ds.indices(5), ShapeError);

  UnpairedDataset again(make_domain(h, 16), make_domain(c, 16), Rng(7));
  for (std::size_t e = 0; e < 3; ++e) {
    ds.begin_epoch(e);
    again.begin_epoch(e);
    for (std::size_t i = 0; i < 5; ++i) CHECK(ds.indices(i) == again.indices(i));
  }
  // Different epochs shuffle differently for at least one of a few epochs.
  bool differs = false;
  ds.begin_epoch(0);
  std::vector<std::pair<std::size_t, std::size_t>> first;
  for (std::size_t i = 0; i < 5; ++i) first.push_back(ds.indices(i));
  for (std::size_t e = 1; e < 4 && !differs; ++e) {
    ds.begin_epoch(e);
    for (std::size_t i = 0; i < 5; ++i) differs |= ds.indices(i) != first[i];
  }
  CHECK(differs);

  const auto [x, y] = ds.get(0);
  CHECK(x.shape() == Shape{3, 16, 16});
  CHECK(x[0] == doctest::Approx(2 * (ds.indices(0).first / 10.0) - 1).epsilon(1e-6));
}

TEST_CASE("load_domain skips undecodable files and fails when nothing decodes") {
  const auto dir = scratch_dir("domain");
  write_png(dir / "good.png", solid(20, 30, 1, 0, 0));
  std::ofstream(dir / "bad.png") << "garbage";
  std::vector<std::string> warnings;
  const auto d = load_domain(dir, 16, [&](const std::string& w) { warnings.push_back(w); });
  CHECK(d.size() == 1);
  CHECK(d.images[0].shape() == Shape{3, 16, 16});
  CHECK(d.images[0][0] == 1.0f);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("bad.png") != std::string::npos);

  fs::remove(dir / "good.png");
  CHECK_THROWS_AS(load_domain(dir, 16), IoError);
  CHECK_THROWS_AS(load_domain(scratch_dir("empty"), 16), IoError);
}

TEST_CASE("flip augmentation is deterministic and mirrors") {
  Rng rng(8);
  const auto img = random_tensor<float>({3, 4, 5}, rng);
  const auto f = flip_horizontal(img);
  CHECK(f[4] == img[0]);
  CHECK(bitwise_equal(flip_horizontal(f), img));
}

TEST_CASE("procedural scenes span dark and bright values") {
  const auto scenes = make_scenes(Rng(0), 8, 64);
  for (const auto& s : scenes) {
    float lo = 1, hi = 0;
    for (float v : s.vec()) lo = std::min(lo, v), hi = std::max(hi, v);
    CHECK(lo < 0.1f);
    CHECK(hi > 0.5f);
  }
  CHECK(!bitwise_equal(scenes[0], scenes[1]));
}
