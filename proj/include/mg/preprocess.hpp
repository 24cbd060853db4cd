#pragma once

#include <array>
#include <span>
#include <stdexcept>

#include "mg/image.hpp"
#include "mg/rng.hpp"
#include "mg/tensor.hpp"

namespace mg {

class SegmentationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- resizing -----------------------------------------------------------------

/// Bilinear resampling of [C,H,W] with half-pixel-centred sampling and edge
/// clamping, so outputs stay within the input's value range.
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);

// ---- feature scaling ------------------------------------------------------------

struct ScalingScheme {
  enum class Kind { SimpleShiftScale, DatasetNormalize, FixedNormalize };
  Kind kind = Kind::SimpleShiftScale;
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> std{1.0f, 1.0f, 1.0f};

  static ScalingScheme simple_shift_scale() { return {}; }
  static ScalingScheme fixed_normalize() {
    return {Kind::FixedNormalize, {0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}};
  }
  static ScalingScheme dataset_normalize(std::array<float, 3> mean, std::array<float, 3> std) {
    return {Kind::DatasetNormalize, mean, std};
  }
};

/// Bytes 0..255 -> scaled [C,H,W] tensor.
Tensor scale_pixels(const ByteImage& image, const ScalingScheme& scheme);
/// Same mapping applied to an image already in [0,1] units (x / 255).
Tensor scale_unit_image(const Tensor& unit, const ScalingScheme& scheme);

struct DatasetStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};  // population standard deviation
  int channels = 3;
};

/// Per-channel mean / std over every pixel of every image, in [0,1] units.
DatasetStats compute_dataset_stats(std::span<const ByteImage> images);

// ---- segmentation -------------------------------------------------------------

struct CannyParams {
  float low = 0.1f;
  float high = 0.3f;
  float sigma = 1.4f;
};

/// Canny edges of a [H,W] (or [1,H,W]) image in [0,1] units. Gradients are
/// Sobel responses divided by 4 (a unit step has magnitude ~1 before blur).
BinaryMask canny_segment(const Tensor& gray, const CannyParams& params = {});

/// Inclusive pixel rectangle.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;
  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  bool operator==(const BBox&) const = default;
};

BBox mask_to_bbox(const BinaryMask& mask);

/// Each side moves out by round(margin * side length), then clamps to the image.
BBox expand_bbox(const BBox& box, float margin, int width, int height);
Tensor crop_to_bbox(const Tensor& image, const BBox& box, float margin = 0.0f);

/// Background pixels (mask false) of a [C,H,W] image become `fill`.
Tensor apply_splash(const Tensor& image, const BinaryMask& mask, std::array<float, 3> fill = {0.0f, 0.0f, 0.0f});

/// Pixels enclosed by an edge set: everything not reachable from the image
/// border through non-edge pixels (4-connected), edges included.
BinaryMask fill_enclosed(const BinaryMask& edges);

// ---- augmentation ----------------------------------------------------------------

struct AugmentPolicy {
  float hflip_prob = 0.5f;
  float vflip_prob = 0.5f;
  std::array<float, 2> brightness{-0.20f, 0.20f};
  std::array<float, 2> contrast{-0.10f, 0.10f};
  std::array<float, 2> rotation_deg{-20.0f, 20.0f};
  std::array<float, 2> zoom{0.8f, 1.25f};

  static AugmentPolicy identity() { return {0.0f, 0.0f, {0, 0}, {0, 0}, {0, 0}, {1, 1}}; }
};

/// The concrete perturbation drawn for one image.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  float brightness = 0.0f;
  float contrast = 0.0f;
  float rotation_deg = 0.0f;
  float zoom = 1.0f;
};

/// Draws every random quantity (always all six, in a fixed order).
AugmentDraw draw_augmentation(const AugmentPolicy& policy, Rng& rng);

/// flips -> brightness x(1+d) -> contrast about the global mean -> rotation
/// -> zoom, then clamp to [0,1]. Identity steps are skipped.
Tensor apply_augmentation(const Tensor& image, const AugmentDraw& draw);
Tensor augment(const Tensor& image, const AugmentPolicy& policy, Rng& rng);

Tensor hflip(const Tensor& image);
Tensor vflip(const Tensor& image);
/// Counter-clockwise rotation about the image centre; bilinear, border replicated.
Tensor rotate(const Tensor& image, float degrees);
/// factor > 1 magnifies about the centre; bilinear, border replicated.
Tensor zoom(const Tensor& image, float factor);

}  // namespace mg
