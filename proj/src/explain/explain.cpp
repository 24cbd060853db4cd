#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mg/explain.hpp"

namespace mg {

namespace {

std::FILE* open_out(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
  return f;
}

void close_out(std::FILE* f, const std::filesystem::path& path) {
  const bool ok = std::fflush(f) == 0;
  std::fclose(f);
  if (!ok) throw ImageIoError("write failed: " + path.string());
}

void require_eval(const Network& net, const char* op) {
  if (net.mode() != Mode::Eval) throw ParameterError(std::string(op) + ": network must be in eval mode");
}

}  // namespace

// ---- saliency ----------------------------------------------------------------------

float SaliencyMap::max() const { return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end()); }

SaliencyMap saliency_map(Network& net, const Tensor& image) {
  require_eval(net, "saliency_map");
  if (image.ndim() != 3) throw DimensionError("saliency_map: expected [C,H,W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor x = image.reshaped({1, c, h, w});
  x.set_requires_grad(true);
  Tape tape;
  const auto out = net.forward(tape, x, false);
  const auto probs = softmax(tape, out.logits);
  const auto p = probs.data();
  const auto pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  const Tensor target = pick(tape, probs, pred);
  if (tape.tracks({&x})) tape.backward(target);

  SaliencyMap map;
  map.width = static_cast<int>(w);
  map.height = static_cast<int>(h);
  map.predicted = pred;
  map.probability = target.item();
  map.values.assign(static_cast<std::size_t>(h * w), 0.0f);
  if (!x.has_grad()) return map;  // output independent of the input
  const auto g = std::as_const(x).grad();
  for (std::int64_t i = 0; i < h * w; ++i) {
    double s = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) s += std::pow(static_cast<double>(g[static_cast<std::size_t>(ch * h * w + i)]), 2);
    map.values[static_cast<std::size_t>(i)] = static_cast<float>(std::sqrt(s));
  }
  for (float v : map.values)
    if (!std::isfinite(v)) throw NumericalError("saliency_map: non-finite gradient");
  return map;
}

ByteImage render_saliency(const SaliencyMap& map) {
  ByteImage img(map.width, map.height, 1);
  const float mx = map.max();
  if (mx <= 0.0f) return img;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0f * map.values[i] / mx));
  }
  return img;
}

void write_saliency(const std::filesystem::path& dir, const std::string& stem, const SaliencyMap& map) {
  write_png(dir / (stem + ".saliency.png"), render_saliency(map));
  const auto path = dir / (stem + ".saliency.csv");
  std::FILE* f = open_out(path);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) std::fprintf(f, x ? ",%.9g" : "%.9g", static_cast<double>(map.at(x, y)));
    std::fputc('\n', f);
  }
  close_out(f, path);
}

// ---- latent / PCA ----------------------------------------------------------------------

Matrix extract_latent(Network& net, const Tensor& batch, int chunk) {
  require_eval(net, "extract_latent");
  if (batch.ndim() != 4) throw DimensionError("extract_latent: expected [N,C,H,W], got " + shape_str(batch.shape()));
  if (chunk < 1) throw ParameterError("extract_latent: chunk must be >= 1");
  const auto n = batch.dim(0);
  const auto per = batch.numel() / std::max<std::int64_t>(n, 1);
  Matrix out(n, net.latent_dim());
  for (std::int64_t start = 0; start < n; start += chunk) {
    const auto m = std::min<std::int64_t>(chunk, n - start);
    std::vector<float> part(batch.data().begin() + start * per, batch.data().begin() + (start + m) * per);
    Tensor x({m, batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(part));
    Tape quiet(false);
    const auto f = net.forward(quiet, x, false);
    const auto d = f.latent.data();
    if (f.latent.dim(1) != out.cols) throw DimensionError("extract_latent: latent width mismatch");
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < out.cols; ++j) out(start + i, j) = d[static_cast<std::size_t>(i * out.cols + j)];
  }
  return out;
}

PcaModel pca_fit(const Matrix& features, int k) {
  const auto n = features.rows, d = features.cols;
  if (n < 2 || d < 1) throw ParameterError("pca_fit: need at least 2 samples and 1 feature");
  if (k < 1) throw ParameterError("pca_fit: k must be >= 1");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> x(features.v.data(), n, d);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Mat xc = x.rowwise() - mean;
  const double denom = static_cast<double>(n - 1);

  // eigenpairs of whichever of covariance (d x d) and Gram (n x n) is smaller
  const bool gram = n < d;
  const Mat s = gram ? Mat(xc * xc.transpose() / denom) : Mat(xc.transpose() * xc / denom);
  Eigen::SelfAdjointEigenSolver<Mat> eig(s);
  if (eig.info() != Eigen::Success) throw NumericalError("pca_fit: eigendecomposition failed");
  const Eigen::VectorXd values = eig.eigenvalues();  // ascending
  const double total = xc.squaredNorm() / denom;
  const double tol = std::max(1e-12, 1e-10 * std::max(0.0, values.maxCoeff())) ;
  int rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) rank += values(i) > tol ? 1 : 0;
  if (k > rank) {
    throw ParameterError("pca_fit: k=" + std::to_string(k) + " exceeds the rank of the centred data; achievable k is 1.." +
                         std::to_string(rank));
  }

  PcaModel model;
  model.mean.assign(mean.data(), mean.data() + d);
  model.components = Matrix(k, d);
  model.total_variance = total;
  for (int c = 0; c < k; ++c) {
    const Eigen::Index idx = values.size() - 1 - c;
    const double lambda = values(idx);
    Eigen::VectorXd v = gram ? Eigen::VectorXd(xc.transpose() * eig.eigenvectors().col(idx)) : Eigen::VectorXd(eig.eigenvectors().col(idx));
    v.normalize();
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::int64_t j = 0; j < d; ++j) model.components(c, j) = v(j);
    model.explained_variance.push_back(lambda);
    model.explained_ratio.push_back(total > 0 ? lambda / total : 0.0);
  }
  return model;
}

Matrix pca_project(const PcaModel& model, const Matrix& features) {
  const auto d = static_cast<std::int64_t>(model.mean.size());
  if (features.cols != d) {
    throw DimensionError("pca_project: feature width " + std::to_string(features.cols) + " != " + std::to_string(d));
  }
  const auto k = model.components.rows;
  Matrix out(features.rows, k);
  for (std::int64_t i = 0; i < features.rows; ++i)
    for (std::int64_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) s += (features(i, j) - model.mean[static_cast<std::size_t>(j)]) * model.components(c, j);
      out(i, c) = s;
    }
  return out;
}

void orient_components(PcaModel& model, const Matrix& features, std::span<const double> reference) {
  if (static_cast<std::int64_t>(reference.size()) != features.rows) {
    throw DimensionError("orient_components: one reference value per sample required");
  }
  const auto coeffs = pca_project(model, features);
  const double rmean = std::accumulate(reference.begin(), reference.end(), 0.0) / static_cast<double>(reference.size());
  for (std::int64_t c = 0; c < model.components.rows; ++c) {
    double cov = 0.0;  // coefficients are already centred
    for (std::int64_t i = 0; i < coeffs.rows; ++i) cov += coeffs(i, c) * (reference[static_cast<std::size_t>(i)] - rmean);
    if (cov < 0.0)
      for (std::int64_t j = 0; j < model.components.cols; ++j) model.components(c, j) = -model.components(c, j);
  }
}

void write_pca_csv(const std::filesystem::path& dir, const PcaModel& model, const Matrix& coefficients,
                   std::span<const std::string> ids, std::span<const int> labels) {
  if (static_cast<std::int64_t>(ids.size()) != coefficients.rows || labels.size() != ids.size()) {
    throw DimensionError("write_pca_csv: ids, labels and coefficient rows differ in count");
  }
  auto path = dir / "pca_coeffs.csv";
  std::FILE* f = open_out(path);
  std::fputs("id,label", f);
  for (std::int64_t c = 0; c < coefficients.cols; ++c) std::fprintf(f, ",pc%lld", static_cast<long long>(c + 1));
  std::fputc('\n', f);
  for (std::int64_t i = 0; i < coefficients.rows; ++i) {
    std::fprintf(f, "%s,%c", ids[static_cast<std::size_t>(i)].c_str(), grade_char(static_cast<Grade>(labels[static_cast<std::size_t>(i)])));
    for (std::int64_t c = 0; c < coefficients.cols; ++c) std::fprintf(f, ",%.9g", coefficients(i, c));
    std::fputc('\n', f);
  }
  close_out(f, path);

  path = dir / "pca_model.csv";
  f = open_out(path);
  std::fputs("row,explained_variance,explained_ratio,values...\n", f);
  std::fputs("mean,,", f);
  for (double m : model.mean) std::fprintf(f, ",%.9g", m);
  std::fputc('\n', f);
  for (std::int64_t c = 0; c < model.components.rows; ++c) {
    std::fprintf(f, "pc%lld,%.9g,%.9g", static_cast<long long>(c + 1), model.explained_variance[static_cast<std::size_t>(c)],
                 model.explained_ratio[static_cast<std::size_t>(c)]);
    for (std::int64_t j = 0; j < model.components.cols; ++j) std::fprintf(f, ",%.9g", model.components(c, j));
    std::fputc('\n', f);
  }
  close_out(f, path);
}

// ---- confusion / ranking -----------------------------------------------------------------

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts)
    for (auto v : row) t += v;
  return t;
}

std::int64_t ConfusionMatrix::row_sum(int truth) const {
  const auto& row = counts[static_cast<std::size_t>(truth)];
  return row[0] + row[1] + row[2];
}

double ConfusionMatrix::accuracy() const {
  const auto t = total();
  return t == 0 ? 0.0 : static_cast<double>(counts[0][0] + counts[1][1] + counts[2][2]) / static_cast<double>(t);
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ParameterError("confusion_matrix: length mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 2 || predictions[i] < 0 || predictions[i] > 2) {
      throw ParameterError("confusion_matrix: grades must be 0..2");
    }
    ++cm.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return cm;
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  std::FILE* f = open_out(path);
  std::fputs("truth\\pred,A,B,C\n", f);
  for (int g = 0; g < 3; ++g) {
    const auto& row = cm.counts[static_cast<std::size_t>(g)];
    std::fprintf(f, "%c,%lld,%lld,%lld\n", grade_char(static_cast<Grade>(g)), static_cast<long long>(row[0]),
                 static_cast<long long>(row[1]), static_cast<long long>(row[2]));
  }
  close_out(f, path);
}

std::vector<Misclassified> rank_misclassified(Network& net, const SampleSet& samples, const ScalingScheme& scaling) {
  const auto r = evaluate(net, samples, scaling);
  std::vector<Misclassified> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (r.predictions[i] != samples[i].label) {
      out.push_back({i, samples[i].id, samples[i].label, r.predictions[i], r.losses[i]});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.loss > b.loss; });
  return out;
}

}  // namespace mg
