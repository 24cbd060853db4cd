#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "mg/tensor.hpp"

namespace mg {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit image, interleaved (row-major, channels last). channels is 1 or 3.
struct ByteImage {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  ByteImage() = default;
  ByteImage(int w, int h, int c, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool operator==(const ByteImage&) const = default;
};

/// One flag per pixel; true = foreground.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int w, int h, bool fill = false);

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::int64_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

/// PNG (any bit depth / colour type, converted to 8-bit RGB) or binary PPM (P6).
ByteImage read_image(const std::filesystem::path& path);
/// Writes 8-bit RGB or grayscale PNG.
void write_png(const std::filesystem::path& path, const ByteImage& image);
void write_ppm(const std::filesystem::path& path, const ByteImage& image);

/// Grayscale PNG, 0 = background, nonzero = foreground.
BinaryMask read_mask(const std::filesystem::path& path);
/// Writes 0 / 255 grayscale PNG.
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);

/// [C,H,W] tensor with values in [0,1].
Tensor to_unit_tensor(const ByteImage& image);
/// Inverse of to_unit_tensor; values are clamped to [0,1] and rounded.
ByteImage from_unit_tensor(const Tensor& image);

/// Luma (0.299 R + 0.587 G + 0.114 B) of a [3,H,W] or [1,H,W] tensor, as [H,W].
Tensor to_grayscale(const Tensor& image);

}  // namespace mg
