#include "mg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <memory>

namespace mg {

ByteImage::ByteImage(int w, int h, int c, std::uint8_t fill) : width(w), height(h), channels(c) {
  if (w < 1 || h < 1 || (c != 1 && c != 3)) throw DimensionError("ByteImage: bad extents");
  pixels.assign(static_cast<std::size_t>(w) * h * c, fill);
}

BinaryMask::BinaryMask(int w, int h, bool fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw DimensionError("BinaryMask: bad extents");
  bits.assign(static_cast<std::size_t>(w) * h, fill ? 1 : 0);
}

std::int64_t BinaryMask::count() const { return std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIoError("cannot open " + path.string());
  return f;
}

// libpng reports errors by longjmp; the message is kept here until the jump lands.
thread_local char png_message[256];

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  std::snprintf(png_message, sizeof png_message, "%s", msg);
  png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

// Returns 8-bit pixels with 1 (gray) or 3 (RGB) channels; alpha is dropped.
ByteImage read_png(const std::filesystem::path& path, bool want_gray) {
  auto file = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageIoError("png: out of memory");
  }
  ByteImage img;
  std::vector<png_bytep> rows;
  volatile bool channel_mismatch = false;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path.string() + ": " + png_message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  const bool src_gray = (color & PNG_COLOR_MASK_COLOR) == 0;
  if (want_gray && !src_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (!want_gray && src_gray) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  if (channels == (want_gray ? 1 : 3)) {
    img = ByteImage(w, h, channels);
    rows.resize(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = img.pixels.data() + static_cast<std::size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } else {
    channel_mismatch = true;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (channel_mismatch) throw ImageIoError("png: unsupported layout in " + path.string());
  return img;
}

int read_ppm_token(std::istream& in) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw ImageIoError("ppm: malformed header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;  // the single whitespace after the token has been consumed
}

ByteImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  char p = 0, six = 0;
  in.get(p).get(six);
  if (p != 'P' || six != '6') throw ImageIoError(path.string() + " is not a binary PPM");
  const int w = read_ppm_token(in), h = read_ppm_token(in), maxval = read_ppm_token(in);
  if (w < 1 || h < 1 || maxval != 255) throw ImageIoError("ppm: only 8-bit images are supported");
  ByteImage img(w, h, 3);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw ImageIoError("ppm: truncated pixel data in " + path.string());
  }
  return img;
}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

}  // namespace

ByteImage read_image(const std::filesystem::path& path) {
  return has_png_signature(path) ? read_png(path, false) : read_ppm(path);
}

void write_png(const std::filesystem::path& path, const ByteImage& image) {
  if (image.channels != 1 && image.channels != 3) throw ImageIoError("write_png: 1 or 3 channels required");
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageIoError("png: out of memory");
  }
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError(path.string() + ": " + png_message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + stride * static_cast<std::size_t>(y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(file.get()) != 0) throw ImageIoError("write failed: " + path.string());
}

void write_ppm(const std::filesystem::path& path, const ByteImage& image) {
  if (image.channels != 3) throw ImageIoError("write_ppm: RGB image required");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw ImageIoError("write failed: " + path.string());
}

BinaryMask read_mask(const std::filesystem::path& path) {
  const ByteImage g = read_png(path, true);
  BinaryMask m(g.width, g.height);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = g.pixels[i] != 0 ? 1 : 0;
  return m;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  ByteImage g(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) g.pixels[i] = mask.bits[i] ? 255 : 0;
  write_png(path, g);
}

Tensor to_unit_tensor(const ByteImage& image) {
  const std::int64_t c = image.channels, h = image.height, w = image.width;
  Tensor t({c, h, w});
  auto d = t.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        d[static_cast<std::size_t>((ch * h + y) * w + x)] =
            static_cast<float>(image.pixels[static_cast<std::size_t>((y * w + x) * c + ch)]) / 255.0f;
      }
    }
  }
  return t;
}

ByteImage from_unit_tensor(const Tensor& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("from_unit_tensor: expected [1|3,H,W], got " + shape_str(image.shape()));
  }
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  ByteImage out(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  const auto d = image.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float v = std::clamp(d[static_cast<std::size_t>((ch * h + y) * w + x)], 0.0f, 1.0f);
        out.pixels[static_cast<std::size_t>((y * w + x) * c + ch)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

Tensor to_grayscale(const Tensor& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("to_grayscale: expected [1|3,H,W], got " + shape_str(image.shape()));
  }
  const auto h = image.dim(1), w = image.dim(2), plane = h * w;
  Tensor out({h, w});
  const auto in = image.data();
  auto o = out.data();
  for (std::int64_t i = 0; i < plane; ++i) {
    const auto at = static_cast<std::size_t>(i);
    o[at] = image.dim(0) == 1 ? in[at]
                              : 0.299f * in[at] + 0.587f * in[at + static_cast<std::size_t>(plane)] +
                                    0.114f * in[at + 2 * static_cast<std::size_t>(plane)];
  }
  return out;
}

}  // namespace mg
