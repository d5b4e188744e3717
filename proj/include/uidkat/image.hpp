#pragma once

// 8-bit RGB image I/O (PNG, JPEG) and pixel-range conversions. Images are
// float tensors of shape (3, H, W) in [0, 1] unless noted.

#include <filesystem>
#include <string>
#include <vector>

#include "uidkat/tensor.hpp"

namespace uidkat {

/// Decodes a PNG or JPEG (by magic bytes) to (3, H, W) in [0, 1]; v / 255.
/// Grayscale and alpha inputs are converted to RGB. Throws IoError.
Tensor<float> read_image(const std::filesystem::path& path);

/// Writes (3, H, W) in [0, 1] as an 8-bit RGB PNG (values are rounded and clamped).
void write_png(const std::filesystem::path& path, const Tensor<float>& img);

/// Files with a .png/.jpg/.jpeg extension (case-insensitive), sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Bilinear resize of (C, H, W) with half-pixel centres and edge clamping.
Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t h, std::size_t w);

/// [0, 1] -> [-1, 1] (2v - 1) and back ((v + 1) / 2).
Tensor<float> to_signed(const Tensor<float>& img);
Tensor<float> to_unit(const Tensor<float>& img);

/// Round-trips through 8-bit: round(clamp(v, 0, 1) * 255) / 255.
Tensor<float> quantize_8bit(const Tensor<float>& img);

/// Adds a leading batch axis: (C, H, W) -> (1, C, H, W); stacks when given several.
Tensor<float> batch_of(const std::vector<Tensor<float>>& imgs);

/// Image b of a (B, C, H, W) batch as (C, H, W).
Tensor<float> image_at(const Tensor<float>& batch, std::size_t b);

/// Reflect-pads (C, H, W) at the bottom/right edges to (C, h, w).
Tensor<float> reflect_pad_to(const Tensor<float>& img, std::size_t h, std::size_t w);

/// Top-left (C, h, w) crop.
Tensor<float> crop(const Tensor<float>& img, std::size_t h, std::size_t w);

}  // namespace uidkat
