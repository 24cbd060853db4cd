#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include "mg/data_io.hpp"
#include "mg/image.hpp"
#include "mg/preprocess.hpp"
#include "mg/rng.hpp"

namespace mg {

Grade parse_grade(std::string_view token) {
  while (!token.empty() && std::isspace(static_cast<unsigned char>(token.front()))) token.remove_prefix(1);
  while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) token.remove_suffix(1);
  if (token == "A") return Grade::A;
  if (token == "B") return Grade::B;
  if (token == "C") return Grade::C;
  throw DataError("unknown grade token '" + std::string(token) + "'");
}

std::array<int, 3> DatasetManifest::grade_counts() const {
  std::array<int, 3> c{};
  for (const auto& e : entries) ++c[static_cast<std::size_t>(e.grade)];
  return c;
}

DatasetManifest load_manifest(const std::filesystem::path& dir, const std::string& split, std::ostream* log) {
  const auto labels = dir / kLabelsFile;
  std::ifstream in(labels, std::ios::binary);
  if (!in) throw DataError("missing labels file " + labels.string());
  DatasetManifest m{split, dir, {}};
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "filename,grade") throw DataError(labels.string() + ": expected header 'filename,grade'");
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw DataError(labels.string() + ":" + std::to_string(line_no) + ": expected 'filename,grade'");
    }
    ManifestEntry e;
    e.filename = line.substr(0, comma);
    try {
      e.grade = parse_grade(std::string_view(line).substr(comma + 1));
    } catch (const DataError& err) {
      throw DataError(labels.string() + ":" + std::to_string(line_no) + ": " + err.what());
    }
    if (!seen.insert(e.filename).second) throw DataError(labels.string() + ": duplicate entry " + e.filename);
    e.image = dir / e.filename;
    if (!std::filesystem::is_regular_file(e.image) || !std::ifstream(e.image, std::ios::binary)) {
      throw DataError("unreadable image " + e.image.string());
    }
    const auto mask = dir / (std::filesystem::path(e.filename).stem().string() + ".mask.png");
    if (std::filesystem::is_regular_file(mask)) e.mask = mask;
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty() && log) *log << "warning: " << labels.string() << " lists no images\n";
  return m;
}

Dataset load_dataset(const std::filesystem::path& root, std::ostream* log) {
  Dataset d{load_manifest(root / "train", "train", log), load_manifest(root / "val", "val", log),
            load_manifest(root / "test", "test", log)};
  if (log) {
    for (const auto* m : {&d.train, &d.val, &d.test}) {
      const auto c = m->grade_counts();
      *log << m->split << ": " << m->entries.size() << " images (A " << c[0] << ", B " << c[1] << ", C " << c[2]
           << ")\n";
    }
  }
  return d;
}

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest) {
  std::filesystem::create_directories(dir);
  const auto path = dir / kLabelsFile;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "filename,grade\n";
  for (const auto& e : manifest.entries) out << e.filename << ',' << grade_char(e.grade) << '\n';
  if (!out.flush()) throw DataError("write failed: " + path.string());
}

SampleSet load_samples(const DatasetManifest& manifest, int size) {
  SampleSet out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Tensor img = to_unit_tensor(read_image(e.image));
    if (size > 0 && (img.dim(1) != size || img.dim(2) != size)) img = resize_bilinear(img, size, size);
    out.push_back({e.filename, img, static_cast<int>(e.grade)});
  }
  return out;
}

std::array<int, 3> grade_allocation(int n, const std::array<double, 3>& mix) {
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = mix[k] * n;
    counts[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - counts[k];
    used += counts[k];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < n; ++i, ++used) ++counts[order[i % 3]];
  return counts;
}

std::array<std::vector<ManifestEntry>, 3> stratified_split(const std::vector<ManifestEntry>& entries,
                                                           std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ParameterError("stratified_split: fractions must lie in [0,1]");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("stratified_split: fractions must sum to 1");

  std::array<std::vector<std::size_t>, 3> by_grade;
  for (std::size_t i = 0; i < entries.size(); ++i) by_grade[static_cast<std::size_t>(entries[i].grade)].push_back(i);

  // cells start at floor(f * n_g); the leftover units are then placed so that
  // rows (grades) and columns (splits) both hit their totals, at most +1 per cell
  const auto targets = grade_allocation(static_cast<int>(entries.size()), fractions);
  std::array<std::array<int, 3>, 3> cell{};
  std::array<std::array<double, 3>, 3> frac{};
  std::array<int, 3> row_left{}, col_left = targets;
  for (std::size_t g = 0; g < 3; ++g) {
    const auto n = static_cast<double>(by_grade[g].size());
    int used = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      cell[g][s] = static_cast<int>(std::floor(fractions[s] * n));
      frac[g][s] = fractions[s] * n - cell[g][s];
      used += cell[g][s];
      col_left[s] -= cell[g][s];
    }
    row_left[g] = static_cast<int>(by_grade[g].size()) - used;
  }
  // Ryser-style fill: largest rows first, each into the columns with the most room
  std::array<std::size_t, 3> rows{0, 1, 2};
  std::stable_sort(rows.begin(), rows.end(), [&](auto a, auto b) { return row_left[a] > row_left[b]; });
  for (auto g : rows) {
    std::array<std::size_t, 3> cols{0, 1, 2};
    std::stable_sort(cols.begin(), cols.end(), [&](auto a, auto b) {
      return col_left[a] != col_left[b] ? col_left[a] > col_left[b] : frac[g][a] > frac[g][b];
    });
    for (std::size_t j = 0; j < 3 && row_left[g] > 0; ++j) {
      const auto s = cols[j];
      if (col_left[s] <= 0 && j + static_cast<std::size_t>(row_left[g]) < 3) continue;
      ++cell[g][s];
      --col_left[s];
      --row_left[g];
    }
  }

  std::array<std::vector<std::size_t>, 3> picked;
  for (std::size_t g = 0; g < 3; ++g) {
    auto idx = by_grade[g];
    Rng rng(derive_seed(seed, {g}));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    std::size_t at = 0;
    for (std::size_t s = 0; s < 3; ++s)
      for (int k = 0; k < cell[g][s]; ++k) picked[s].push_back(idx[at++]);
  }
  std::array<std::vector<ManifestEntry>, 3> out;
  for (std::size_t s = 0; s < 3; ++s) {
    std::sort(picked[s].begin(), picked[s].end());
    for (auto i : picked[s]) out[s].push_back(entries[i]);
  }
  return out;
}

}  // namespace mg
