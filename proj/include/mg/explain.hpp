#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mg/image.hpp"
#include "mg/network.hpp"
#include "mg/training.hpp"

namespace mg {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(std::int64_t r, std::int64_t c) : rows(r), cols(c), v(static_cast<std::size_t>(r * c), 0.0) {}
  double& operator()(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
  double operator()(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
};

// ---- saliency ----------------------------------------------------------------------

struct SaliencyMap {
  int width = 0;
  int height = 0;
  std::vector<float> values;  // row-major, >= 0
  int predicted = 0;
  float probability = 0.0f;

  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  float max() const;
};

/// Gradient of the predicted class's softmax probability with respect to the
/// network input `image` ([C,H,W], already feature-scaled); each pixel holds
/// the L2 norm over channels. The network must be in eval mode.
SaliencyMap saliency_map(Network& net, const Tensor& image);

/// Grayscale heat image scaled by the map's maximum (all black when it is 0).
ByteImage render_saliency(const SaliencyMap& map);
/// Writes `<stem>.saliency.png` and `<stem>.saliency.csv` (one row per image row).
void write_saliency(const std::filesystem::path& dir, const std::string& stem, const SaliencyMap& map);

// ---- latent features and PCA --------------------------------------------------------

/// Row i = the flattened features the classifier consumes for image i. `batch`
/// is [N,C,S,S], feature-scaled; eval mode required.
Matrix extract_latent(Network& net, const Tensor& batch, int chunk = 32);

struct PcaModel {
  std::vector<double> mean;             // d
  Matrix components;                    // k x d, orthonormal rows
  std::vector<double> explained_variance;  // k, descending
  std::vector<double> explained_ratio;     // k, share of the total variance
  double total_variance = 0.0;
};

/// Top-k principal components of the rows of `features` (N >= 2). Works on
/// the smaller of the covariance and Gram matrices. Each component is signed
/// so its largest-magnitude entry is positive. Throws ParameterError naming
/// the achievable k when k exceeds the rank.
PcaModel pca_fit(const Matrix& features, int k);

/// (x - mean) * components^T
Matrix pca_project(const PcaModel& model, const Matrix& features);

/// Flips each component whose coefficients correlate negatively with
/// `reference` (one value per row of `features`).
void orient_components(PcaModel& model, const Matrix& features, std::span<const double> reference);

void write_pca_csv(const std::filesystem::path& dir, const PcaModel& model, const Matrix& coefficients,
                   std::span<const std::string> ids, std::span<const int> labels);

// ---- confusion matrix / ranking ------------------------------------------------------------

struct ConfusionMatrix {
  std::array<std::array<std::int64_t, 3>, 3> counts{};  // [truth][predicted]

  std::int64_t total() const;
  std::int64_t row_sum(int truth) const;
  double accuracy() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels);
/// Header row and column A,B,C; rows are the true grade.
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);

struct Misclassified {
  std::size_t index = 0;
  std::string id;
  int label = 0;
  int predicted = 0;
  float loss = 0.0f;  // per-sample cross-entropy
};

/// Misclassified samples by descending cross-entropy (ties keep dataset order).
std::vector<Misclassified> rank_misclassified(Network& net, const SampleSet& samples, const ScalingScheme& scaling);

}  // namespace mg
