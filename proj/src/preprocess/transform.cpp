#include <algorithm>
#include <cmath>
#include <numbers>

#include "mg/preprocess.hpp"

namespace mg {

namespace {

struct Chw {
  std::int64_t c, h, w;
};

Chw chw(const Tensor& image, const char* op) {
  if (image.ndim() != 3) throw DimensionError(std::string(op) + ": expected [C,H,W], got " + shape_str(image.shape()));
  return {image.dim(0), image.dim(1), image.dim(2)};
}

// Bilinear sample of one plane at (x, y), with coordinates clamped to the
// pixel-centre grid (border replication).
float sample_clamped(const float* plane, std::int64_t h, std::int64_t w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::int64_t>(std::floor(x));
  const auto y0 = static_cast<std::int64_t>(std::floor(y));
  const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
  const double bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

// out(x, y) = in(map(x, y)) for every channel, in pixel-centre coordinates.
template <class Map>
Tensor warp(const Tensor& image, Map map) {
  const auto [c, h, w] = chw(image, "warp");
  Tensor out(image.shape());
  const auto in = image.data();
  auto o = out.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto [sx, sy] = map(static_cast<double>(x), static_cast<double>(y));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        o[static_cast<std::size_t>((ch * h + y) * w + x)] = sample_clamped(in.data() + ch * h * w, h, w, sx, sy);
      }
    }
  }
  return out;
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
  const auto [c, h, w] = chw(image, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear: target extents must be positive");
  if (out_h == h && out_w == w) return image.clone();
  Tensor out({c, out_h, out_w});
  const auto in = image.data();
  auto o = out.data();
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* plane = in.data() + ch * h * w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
      for (std::int64_t x = 0; x < out_w; ++x) {
        const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
        o[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = sample_clamped(plane, h, w, src_x, src_y);
      }
    }
  }
  return out;
}

// ---- scaling ---------------------------------------------------------------------

Tensor scale_unit_image(const Tensor& unit, const ScalingScheme& scheme) {
  const auto [c, h, w] = chw(unit, "scale_pixels");
  if (scheme.kind != ScalingScheme::Kind::SimpleShiftScale && c > 3) {
    throw DimensionError("scale_pixels: normalization needs at most 3 channels");
  }
  if (scheme.kind != ScalingScheme::Kind::SimpleShiftScale) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      if (!(scheme.std[static_cast<std::size_t>(ch)] > 0.0f)) {
        throw NumericalError("scale_pixels: channel " + std::to_string(ch) + " has zero standard deviation");
      }
    }
  }
  Tensor out(unit.shape());
  const auto in = unit.data();
  auto o = out.data();
  const std::int64_t plane = h * w;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const auto at = static_cast<std::size_t>(ch * plane + i);
      const double x = in[at];
      if (scheme.kind == ScalingScheme::Kind::SimpleShiftScale) {
        o[at] = static_cast<float>((x * 255.0 - 127.5) / 255.0);
      } else {
        const auto k = static_cast<std::size_t>(ch);
        o[at] = static_cast<float>((x - scheme.mean[k]) / scheme.std[k]);
      }
    }
  }
  return out;
}

Tensor scale_pixels(const ByteImage& image, const ScalingScheme& scheme) {
  if (scheme.kind == ScalingScheme::Kind::SimpleShiftScale) {
    // exact byte form: (x - 127.5) / 255
    Tensor out({image.channels, image.height, image.width});
    auto o = out.data();
    const std::int64_t h = image.height, w = image.width, c = image.channels;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t ch = 0; ch < c; ++ch)
          o[static_cast<std::size_t>((ch * h + y) * w + x)] = static_cast<float>(
              (image.pixels[static_cast<std::size_t>((y * w + x) * c + ch)] - 127.5) / 255.0);
    return out;
  }
  return scale_unit_image(to_unit_tensor(image), scheme);
}

DatasetStats compute_dataset_stats(std::span<const ByteImage> images) {
  if (images.empty()) throw ParameterError("compute_dataset_stats: empty image set");
  DatasetStats stats;
  stats.channels = images.front().channels;
  // Welford's update per channel, in [0,1] units
  std::array<double, 3> mean{}, m2{};
  std::array<std::int64_t, 3> n{};
  for (const auto& img : images) {
    if (img.channels != stats.channels) throw DimensionError("compute_dataset_stats: mixed channel counts");
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const auto c = i % static_cast<std::size_t>(img.channels);
      const double x = img.pixels[i] / 255.0;
      ++n[c];
      const double d = x - mean[c];
      mean[c] += d / static_cast<double>(n[c]);
      m2[c] += d * (x - mean[c]);
    }
  }
  for (int c = 0; c < stats.channels; ++c) {
    const auto k = static_cast<std::size_t>(c);
    stats.mean[k] = mean[k];
    stats.std[k] = std::sqrt(m2[k] / static_cast<double>(n[k]));
  }
  return stats;
}

// ---- cropping / splash --------------------------------------------------------------

BBox expand_bbox(const BBox& box, float margin, int width, int height) {
  if (box.x_max < box.x_min || box.y_max < box.y_min) throw SegmentationError("bbox is degenerate");
  if (margin < 0.0f) throw ParameterError("crop margin must be >= 0");
  const int mx = static_cast<int>(std::lround(margin * static_cast<float>(box.width())));
  const int my = static_cast<int>(std::lround(margin * static_cast<float>(box.height())));
  BBox out{std::max(0, box.x_min - mx), std::max(0, box.y_min - my), std::min(width - 1, box.x_max + mx),
           std::min(height - 1, box.y_max + my)};
  if (out.x_max < out.x_min || out.y_max < out.y_min) throw SegmentationError("bbox lies outside the image");
  return out;
}

Tensor crop_to_bbox(const Tensor& image, const BBox& box, float margin) {
  const auto [c, h, w] = chw(image, "crop_to_bbox");
  const BBox b = expand_bbox(box, margin, static_cast<int>(w), static_cast<int>(h));
  const std::int64_t ow = b.width(), oh = b.height();
  Tensor out({c, oh, ow});
  const auto in = image.data();
  auto o = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x)
        o[static_cast<std::size_t>((ch * oh + y) * ow + x)] =
            in[static_cast<std::size_t>((ch * h + y + b.y_min) * w + x + b.x_min)];
  return out;
}

Tensor apply_splash(const Tensor& image, const BinaryMask& mask, std::array<float, 3> fill) {
  const auto [c, h, w] = chw(image, "apply_splash");
  if (mask.width != w || mask.height != h) throw DimensionError("apply_splash: mask and image sizes differ");
  if (c > 3) throw DimensionError("apply_splash: at most 3 channels");
  Tensor out = image.clone();
  auto o = out.data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (!mask.at(static_cast<int>(x), static_cast<int>(y)))
        for (std::int64_t ch = 0; ch < c; ++ch) o[static_cast<std::size_t>((ch * h + y) * w + x)] = fill[static_cast<std::size_t>(ch)];
  return out;
}

// ---- augmentation -------------------------------------------------------------------

Tensor hflip(const Tensor& image) {
  const auto [c, h, w] = chw(image, "hflip");
  Tensor out(image.shape());
  const auto in = image.data();
  auto o = out.data();
  for (std::int64_t r = 0; r < c * h; ++r)
    for (std::int64_t x = 0; x < w; ++x) o[static_cast<std::size_t>(r * w + x)] = in[static_cast<std::size_t>(r * w + w - 1 - x)];
  return out;
}

Tensor vflip(const Tensor& image) {
  const auto [c, h, w] = chw(image, "vflip");
  Tensor out(image.shape());
  const auto in = image.data();
  auto o = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      std::copy_n(in.data() + (ch * h + h - 1 - y) * w, w, o.data() + (ch * h + y) * w);
  return out;
}

Tensor rotate(const Tensor& image, float degrees) {
  const auto [c, h, w] = chw(image, "rotate");
  (void)c;
  const double t = static_cast<double>(degrees) * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  // inverse map; with y pointing down this turns the content counter-clockwise on screen
  return warp(image, [=](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return std::pair{cx + cs * dx - sn * dy, cy + sn * dx + cs * dy};
  });
}

Tensor zoom(const Tensor& image, float factor) {
  if (!(factor > 0.0f)) throw ParameterError("zoom: factor must be positive");
  const auto [c, h, w] = chw(image, "zoom");
  (void)c;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double inv = 1.0 / static_cast<double>(factor);
  return warp(image, [=](double x, double y) { return std::pair{cx + (x - cx) * inv, cy + (y - cy) * inv}; });
}

AugmentDraw draw_augmentation(const AugmentPolicy& p, Rng& rng) {
  AugmentDraw d;
  d.hflip = uniform(rng, 0.0, 1.0) < p.hflip_prob;
  d.vflip = uniform(rng, 0.0, 1.0) < p.vflip_prob;
  d.brightness = static_cast<float>(uniform(rng, p.brightness[0], p.brightness[1]));
  d.contrast = static_cast<float>(uniform(rng, p.contrast[0], p.contrast[1]));
  d.rotation_deg = static_cast<float>(uniform(rng, p.rotation_deg[0], p.rotation_deg[1]));
  d.zoom = static_cast<float>(uniform(rng, p.zoom[0], p.zoom[1]));
  return d;
}

Tensor apply_augmentation(const Tensor& image, const AugmentDraw& d) {
  const auto [c, h, w] = chw(image, "augment");
  if (h < 2 || w < 2) throw DimensionError("augment: spatial extents must be >= 2");
  (void)c;
  Tensor x = image;
  bool changed = false;
  if (d.hflip) x = hflip(x), changed = true;
  if (d.vflip) x = vflip(x), changed = true;
  if (d.brightness != 0.0f) {
    x = changed ? x : x.clone();
    for (auto& v : x.data()) v *= 1.0f + d.brightness;
    changed = true;
  }
  if (d.contrast != 0.0f) {
    x = changed ? x : x.clone();
    double mean = 0.0;
    for (float v : x.data()) mean += v;
    mean /= static_cast<double>(x.numel());
    const double k = 1.0 + d.contrast;
    for (auto& v : x.data()) v = static_cast<float>((v - mean) * k + mean);
    changed = true;
  }
  if (d.rotation_deg != 0.0f) x = rotate(x, d.rotation_deg), changed = true;
  if (d.zoom != 1.0f) x = zoom(x, d.zoom), changed = true;
  if (!changed) return image.clone();
  for (auto& v : x.data()) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

Tensor augment(const Tensor& image, const AugmentPolicy& policy, Rng& rng) {
  return apply_augmentation(image, draw_augmentation(policy, rng));
}

}  // namespace mg
