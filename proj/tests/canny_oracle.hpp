#pragma once

// Reference edge sets from OpenCV, used only by the tests.

#include <opencv2/imgproc.hpp>

#include "mg/image.hpp"
#include "mg/preprocess.hpp"

namespace mg::testing {

// OpenCV's Sobel is unnormalized on 0..255 values, so a threshold t on our
// [0,1] / 4 scale corresponds to t * 4 * 255 there.
inline BinaryMask opencv_canny(const Tensor& gray, const CannyParams& p) {
  const int h = static_cast<int>(gray.dim(gray.ndim() - 2)), w = static_cast<int>(gray.dim(gray.ndim() - 1));
  cv::Mat img(h, w, CV_32F);
  const auto d = gray.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at<float>(y, x) = d[static_cast<std::size_t>(y) * w + x] * 255.0f;
  cv::Mat blurred, u8;
  cv::GaussianBlur(img, blurred, cv::Size(0, 0), p.sigma, p.sigma, cv::BORDER_REPLICATE);
  blurred.convertTo(u8, CV_8U);
  cv::Mat edges;
  cv::Canny(u8, edges, p.low * 1020.0, p.high * 1020.0, 3, true);
  BinaryMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(x, y, edges.at<std::uint8_t>(y, x) != 0);
  return m;
}

// True when every pixel of `a` lies within one pixel (8-neighbourhood) of `b`.
inline bool within_dilation(const BinaryMask& a, const BinaryMask& b) {
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (!a.at(x, y)) continue;
      bool near = false;
      for (int dy = -1; dy <= 1 && !near; ++dy)
        for (int dx = -1; dx <= 1 && !near; ++dx) {
          const int nx = x + dx, ny = y + dy;
          near = nx >= 0 && ny >= 0 && nx < b.width && ny < b.height && b.at(nx, ny);
        }
      if (!near) return false;
    }
  return true;
}

inline bool edges_match(const BinaryMask& a, const BinaryMask& b) {
  return within_dilation(a, b) && within_dilation(b, a);
}

inline Tensor step_image(int size, int edge_x) {
  Tensor t({size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) t.at(y * size + x) = x >= edge_x ? 1.0f : 0.0f;
  return t;
}

inline Tensor square_image(int size, int lo, int hi, float bg = 0.1f, float fg = 0.9f) {
  Tensor t({size, size}, bg);
  for (int y = lo; y <= hi; ++y)
    for (int x = lo; x <= hi; ++x) t.at(y * size + x) = fg;
  return t;
}

}  // namespace mg::testing
