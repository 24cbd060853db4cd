#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mg/sample.hpp"

namespace mg {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Grade parse_grade(std::string_view token);

struct ManifestEntry {
  std::string filename;  // as written in labels.csv
  std::filesystem::path image;
  Grade grade = Grade::A;
  std::optional<std::filesystem::path> mask;
};

struct DatasetManifest {
  std::string split;
  std::filesystem::path dir;
  std::vector<ManifestEntry> entries;

  std::array<int, 3> grade_counts() const;
};

struct Dataset {
  DatasetManifest train, val, test;
};

inline constexpr const char* kLabelsFile = "labels.csv";

/// Reads `dir/labels.csv` (header `filename,grade`). Every image must exist;
/// `<stem>.mask.png` beside it is picked up when present. Warnings go to `log`.
DatasetManifest load_manifest(const std::filesystem::path& dir, const std::string& split, std::ostream* log = nullptr);
/// Loads root/{train,val,test} and prints a grade distribution report to `log`.
Dataset load_dataset(const std::filesystem::path& root, std::ostream* log = nullptr);
/// Writes `dir/labels.csv` for the manifest's entries, in order.
void write_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);

/// Decodes every image to [0,1] units, resized to size x size when needed
/// (size <= 0 keeps native sizes).
SampleSet load_samples(const DatasetManifest& manifest, int size);

/// Per-grade shuffles, then largest-remainder allocation so every grade's share
/// of each split is within one sample of fraction * count and the split totals
/// match the overall targets.
std::array<std::vector<ManifestEntry>, 3> stratified_split(const std::vector<ManifestEntry>& entries,
                                                           std::array<double, 3> fractions, std::uint64_t seed);

// ---- synthetic fruit ---------------------------------------------------------------

struct SynthSpec {
  enum class Background { Plain, Cluttered };
  std::array<int, 3> n{300, 60, 60};  // train / val / test
  int image_size = 64;
  std::array<double, 3> grade_mix{0.32, 0.37, 0.31};
  Background background = Background::Plain;
  /// Fruit semi-axis range as a fraction of the image size.
  std::array<double, 2> radius{0.30, 0.42};
  /// Cluttered backgrounds shrink the fruit and move it off-centre.
  std::array<double, 2> cluttered_radius{0.18, 0.28};
  /// Defect area as a fraction of fruit area: below ab is A, below bc is B, else C.
  double threshold_ab = 0.005;
  double threshold_bc = 0.035;
  /// Probability that a label is replaced by a different grade.
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Monotone rule: a larger defect area never yields a better grade.
Grade grade_from_defect_area(double fraction, const SynthSpec& spec);

struct SynthRecord {
  std::string split;
  std::string filename;
  Grade grade = Grade::A;       // label written to disk
  Grade true_grade = Grade::A;  // from the defect area
  double defect_fraction = 0.0;
  int defects = 0;
};

/// Exact per-split counts of each grade (largest remainder on the mix).
std::array<int, 3> grade_allocation(int n, const std::array<double, 3>& mix);

/// Writes root/{train,val,test}/ images, `.mask.png` masks and labels.csv,
/// plus root/synth_report.csv. A pure function of the spec.
std::vector<SynthRecord> generate_synthetic(const std::filesystem::path& root, const SynthSpec& spec);

}  // namespace mg
