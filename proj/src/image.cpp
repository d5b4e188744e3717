#include "uidkat/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

namespace uidkat {

namespace fs = std::filesystem;

namespace {

Tensor<float> from_interleaved(const std::vector<unsigned char>& px, std::size_t h,
                               std::size_t w) {
  Tensor<float> img({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img[(c * h + y) * w + x] = static_cast<float>(px[(y * w + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return img;
}

Tensor<float> read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return from_interleaved(px, image.height, image.width);
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_on_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Tensor<float> read_jpeg(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw IoError("cannot open '" + path.string() + "'");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_on_error;
  // Locals modified after setjmp are declared before it and not read after a jump.
  std::vector<unsigned char> px;
  std::size_t h = 0, w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("cannot decode JPEG '" + path.string() + "': " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = cinfo.output_height;
  w = cinfo.output_width;
  px.resize(h * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(px, h, w);
}

void expect_image(const Tensor<float>& img, const char* what) {
  if (img.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected (C, H, W), got " + shape_str(img.shape()));
  }
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

Tensor<float> read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  unsigned char magic[8] = {};
  in.read(reinterpret_cast<char*>(magic), sizeof magic);
  if (in.gcount() >= 8 && png_sig_cmp(magic, 0, 8) == 0) return read_png(path);
  if (in.gcount() >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) {
    return read_jpeg(path);
  }
  throw IoError("'" + path.string() + "' is neither PNG nor JPEG");
}

void write_png(const fs::path& path, const Tensor<float>& img) {
  expect_image(img, "write_png");
  if (img.dim(0) != 3) throw ShapeError("write_png: expected 3 channels");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<unsigned char> px(h * w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img[(c * h + y) * w + x], 0.0f, 1.0f);
        px[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, px.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = lower(e.path().extension().string());
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t h, std::size_t w) {
  expect_image(img, "resize_bilinear");
  if (h == 0 || w == 0) throw ShapeError("resize_bilinear: empty target size");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == h && W == w) return img;
  Tensor<float> out({C, h, w});
  const double sy = static_cast<double>(H) / h, sx = static_cast<double>(W) / w;
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ay = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double ax = fx - x0;
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - ax) + p[y0 * W + x1] * ax;
        const double bot = p[y1 * W + x0] * (1 - ax) + p[y1 * W + x1] * ax;
        out[(c * h + y) * w + x] = static_cast<float>(top * (1 - ay) + bot * ay);
      }
    }
  }
  return out;
}

Tensor<float> to_signed(const Tensor<float>& img) {
  Tensor<float> out = img;
  for (auto& v : out.vec()) v = 2.0f * v - 1.0f;
  return out;
}

Tensor<float> to_unit(const Tensor<float>& img) {
  Tensor<float> out = img;
  for (auto& v : out.vec()) v = (v + 1.0f) * 0.5f;
  return out;
}

Tensor<float> quantize_8bit(const Tensor<float>& img) {
  Tensor<float> out = img;
  for (auto& v : out.vec()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return out;
}

Tensor<float> batch_of(const std::vector<Tensor<float>>& imgs) {
  if (imgs.empty()) throw ShapeError("batch_of: no images");
  for (const auto& im : imgs) {
    expect_image(im, "batch_of");
    expect_shape(im.shape(), imgs[0].shape(), "batch_of");
  }
  const auto& s = imgs[0].shape();
  std::vector<float> data;
  data.reserve(imgs.size() * imgs[0].numel());
  for (const auto& im : imgs) data.insert(data.end(), im.vec().begin(), im.vec().end());
  return Tensor<float>({imgs.size(), s[0], s[1], s[2]}, std::move(data));
}

Tensor<float> image_at(const Tensor<float>& batch, std::size_t b) {
  if (batch.rank() != 4 || b >= batch.dim(0)) throw ShapeError("image_at: index out of range");
  const std::size_t n = batch.numel() / batch.dim(0);
  std::vector<float> data(batch.data() + b * n, batch.data() + (b + 1) * n);
  return Tensor<float>({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(data));
}

Tensor<float> reflect_pad_to(const Tensor<float>& img, std::size_t h, std::size_t w) {
  expect_image(img, "reflect_pad_to");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (h < H || w < W) throw ShapeError("reflect_pad_to: target smaller than image");
  if ((h > H && h - H >= H) || (w > W && w - W >= W)) {
    throw ShapeError("reflect_pad_to: padding must be smaller than the image side");
  }
  Tensor<float> out({C, h, w});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = y < H ? y : 2 * (H - 1) - y;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = x < W ? x : 2 * (W - 1) - x;
        out[(c * h + y) * w + x] = img[(c * H + sy) * W + sx];
      }
    }
  }
  return out;
}

Tensor<float> crop(const Tensor<float>& img, std::size_t h, std::size_t w) {
  expect_image(img, "crop");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (h > H || w > W) throw ShapeError("crop: target larger than image");
  Tensor<float> out({C, h, w});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(img.data() + (c * H + y) * W, w, out.data() + (c * h + y) * w);
    }
  }
  return out;
}

}  // namespace uidkat
