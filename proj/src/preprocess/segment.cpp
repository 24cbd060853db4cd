#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mg/preprocess.hpp"

namespace mg {

namespace {

struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
  double clamped(int x, int y) const { return at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); }
};

// Separable Gaussian, radius ceil(3 sigma), replicated borders.
Plane gaussian_blur(const Plane& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& x : k) x /= sum;
  Plane tmp(in.w, in.h), out(in.w, in.h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * in.clamped(x + i, y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp.clamped(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

}  // namespace

BinaryMask canny_segment(const Tensor& gray, const CannyParams& params) {
  if (!(gray.ndim() == 2 || (gray.ndim() == 3 && gray.dim(0) == 1))) {
    throw DimensionError("canny_segment: expected [H,W] or [1,H,W], got " + shape_str(gray.shape()));
  }
  if (!(params.low >= 0.0f && params.low <= params.high)) throw ParameterError("canny_segment: need 0 <= low <= high");
  const int h = static_cast<int>(gray.dim(gray.ndim() - 2)), w = static_cast<int>(gray.dim(gray.ndim() - 1));
  Plane img(w, h);
  const auto d = gray.data();
  for (std::size_t i = 0; i < img.v.size(); ++i) img.v[i] = d[i];
  const Plane b = gaussian_blur(img, params.sigma);

  Plane mag(w, h), gx(w, h), gy(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = (b.clamped(x + 1, y - 1) + 2 * b.clamped(x + 1, y) + b.clamped(x + 1, y + 1)) -
                        (b.clamped(x - 1, y - 1) + 2 * b.clamped(x - 1, y) + b.clamped(x - 1, y + 1));
      const double sy = (b.clamped(x - 1, y + 1) + 2 * b.clamped(x, y + 1) + b.clamped(x + 1, y + 1)) -
                        (b.clamped(x - 1, y - 1) + 2 * b.clamped(x, y - 1) + b.clamped(x + 1, y - 1));
      gx.at(x, y) = sx / 4.0;
      gy.at(x, y) = sy / 4.0;
      mag.at(x, y) = std::hypot(sx, sy) / 4.0;
    }

  // non-maximum suppression along the gradient direction quantized to 0/45/90/135 degrees
  Plane thin(w, h);
  constexpr double kTie = 1e-6;
  const auto m_at = [&](int x, int y) { return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : mag.at(x, y); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double m = mag.at(x, y);
      if (m <= kTie) continue;
      double deg = std::atan2(gy.at(x, y), gx.at(x, y)) * 180.0 / std::numbers::pi;
      if (deg < 0) deg += 180.0;
      int dx, dy;
      if (deg < 22.5 || deg >= 157.5) dx = 1, dy = 0;
      else if (deg < 67.5) dx = 1, dy = 1;
      else if (deg < 112.5) dx = 0, dy = 1;
      else dx = -1, dy = 1;
      // ties (up to float noise in the input) keep the pixel on the backward
      // side so a plateau leaves one survivor
      if (m >= m_at(x - dx, y - dy) - kTie && m > m_at(x + dx, y + dy) + kTie) thin.at(x, y) = m;
    }

  // double threshold + 8-connected hysteresis from the strong pixels
  BinaryMask edges(w, h);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (thin.at(x, y) >= params.high && thin.at(x, y) > 0.0) {
        edges.set(x, y, true);
        stack.emplace_back(x, y);
      }
  while (!stack.empty()) {
    const auto [x, y] = stack.back();
    stack.pop_back();
    for (int ny = y - 1; ny <= y + 1; ++ny)
      for (int nx = x - 1; nx <= x + 1; ++nx) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h || edges.at(nx, ny)) continue;
        if (thin.at(nx, ny) >= params.low && thin.at(nx, ny) > 0.0) {
          edges.set(nx, ny, true);
          stack.emplace_back(nx, ny);
        }
      }
  }
  return edges;
}

BBox mask_to_bbox(const BinaryMask& mask) {
  BBox box{mask.width, mask.height, -1, -1};
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        box.x_min = std::min(box.x_min, x);
        box.x_max = std::max(box.x_max, x);
        box.y_min = std::min(box.y_min, y);
        box.y_max = std::max(box.y_max, y);
      }
  if (box.x_max < 0) throw SegmentationError("mask has no foreground pixels");
  return box;
}

BinaryMask fill_enclosed(const BinaryMask& edges) {
  const int w = edges.width, h = edges.height;
  BinaryMask outside(w, h);
  std::vector<std::pair<int, int>> stack;
  const auto seed = [&](int x, int y) {
    if (!edges.at(x, y) && !outside.at(x, y)) {
      outside.set(x, y, true);
      stack.emplace_back(x, y);
    }
  };
  for (int x = 0; x < w; ++x) seed(x, 0), seed(x, h - 1);
  for (int y = 0; y < h; ++y) seed(0, y), seed(w - 1, y);
  while (!stack.empty()) {
    const auto [x, y] = stack.back();
    stack.pop_back();
    if (x > 0) seed(x - 1, y);
    if (x + 1 < w) seed(x + 1, y);
    if (y > 0) seed(x, y - 1);
    if (y + 1 < h) seed(x, y + 1);
  }
  BinaryMask filled(w, h);
  for (std::size_t i = 0; i < filled.bits.size(); ++i) filled.bits[i] = outside.bits[i] ? 0 : 1;
  return filled;
}

}  // namespace mg
