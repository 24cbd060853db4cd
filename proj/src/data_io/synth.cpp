#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "mg/data_io.hpp"
#include "mg/image.hpp"
#include "mg/rng.hpp"

namespace mg {

void SynthSpec::validate() const {
  for (int k : n)
    if (k < 0) throw ParameterError("synth: split sizes must be >= 0");
  if (image_size < 16) throw ParameterError("synth: image_size must be >= 16");
  double total = 0.0;
  for (double m : grade_mix) {
    if (m < 0.0) throw ParameterError("synth: grade mix must be non-negative");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ParameterError("synth: grade mix must sum to 1");
  if (!(0.0 < threshold_ab && threshold_ab < threshold_bc && threshold_bc < 0.1)) {
    throw ParameterError("synth: need 0 < threshold_ab < threshold_bc < 0.1");
  }
  if (!(radius[0] > 0.0 && radius[0] <= radius[1] && radius[1] < 0.5) ||
      !(cluttered_radius[0] > 0.0 && cluttered_radius[0] <= cluttered_radius[1] && cluttered_radius[1] < 0.5)) {
    throw ParameterError("synth: radius ranges must satisfy 0 < lo <= hi < 0.5");
  }
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ParameterError("synth: label_noise must lie in [0,1]");
}

Grade grade_from_defect_area(double fraction, const SynthSpec& spec) {
  if (fraction < spec.threshold_ab) return Grade::A;
  if (fraction < spec.threshold_bc) return Grade::B;
  return Grade::C;
}

namespace {

using Rgb = std::array<double, 3>;

struct Canvas {
  int size;
  std::vector<Rgb> px;
  explicit Canvas(int s, Rgb fill) : size(s), px(static_cast<std::size_t>(s) * s, fill) {}
  Rgb& at(int x, int y) { return px[static_cast<std::size_t>(y) * size + x]; }
};

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

struct Ellipse {
  double cx, cy, rx, ry, angle;
  // (u, v) in the ellipse frame, unit circle inside
  std::pair<double, double> local(double x, double y) const {
    const double dx = x - cx, dy = y - cy, c = std::cos(angle), s = std::sin(angle);
    return {(c * dx + s * dy) / rx, (-s * dx + c * dy) / ry};
  }
  bool contains(double x, double y) const {
    const auto [u, v] = local(x, y);
    return u * u + v * v <= 1.0;
  }
};

void paint_background(Canvas& cv, const SynthSpec& spec, Rng& rng) {
  const int s = cv.size;
  if (spec.background == SynthSpec::Background::Plain) {
    const double g = uniform(rng, 0.80, 0.90);
    const Rgb tint{g, g * uniform(rng, 0.97, 1.0), g * uniform(rng, 0.94, 1.0)};
    std::fill(cv.px.begin(), cv.px.end(), tint);
    return;
  }
  // cluttered: a tinted gradient, random boxes and discs, and dark specks that
  // resemble defects but lie outside the fruit
  const Rgb c0{uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
  const Rgb c1{uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) cv.at(x, y) = lerp(c0, c1, (x + y) / (2.0 * (s - 1)));
  const int shapes = 8 + static_cast<int>(uniform_index(rng, 7));
  for (int k = 0; k < shapes; ++k) {
    const Rgb col{uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)};
    const double x0 = uniform(rng, 0, s), y0 = uniform(rng, 0, s);
    const double w = uniform(rng, 0.08, 0.35) * s, h = uniform(rng, 0.08, 0.35) * s;
    const bool disc = uniform(rng, 0, 1) < 0.5;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double dx = (x + 0.5 - x0) / (w / 2), dy = (y + 0.5 - y0) / (h / 2);
        if (disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0) cv.at(x, y) = col;
      }
  }
  const int specks = 4 + static_cast<int>(uniform_index(rng, 8));
  for (int k = 0; k < specks; ++k) {
    const double x0 = uniform(rng, 0, s), y0 = uniform(rng, 0, s), r = uniform(rng, 0.02, 0.06) * s;
    const Rgb col{uniform(rng, 0.15, 0.35), uniform(rng, 0.10, 0.22), uniform(rng, 0.03, 0.10)};
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (std::hypot(x + 0.5 - x0, y + 0.5 - y0) <= r) cv.at(x, y) = col;
  }
}

struct Defects {
  std::vector<std::array<double, 3>> dots;  // cx, cy, r in pixels
  double fraction = 0.0;
};

// Dots scattered inside the fruit, sized towards a target area for the grade;
// the realised area (pixels of fruit covered) decides the grade.
Defects draw_defects(Grade want, const Ellipse& fruit, const std::vector<std::pair<int, int>>& fruit_px,
                     const SynthSpec& spec, Rng& rng) {
  const double area = static_cast<double>(fruit_px.size());
  for (int attempt = 0; attempt < 100; ++attempt) {
    Defects d;
    double target = 0.0;
    int count = 0;
    switch (want) {
      case Grade::A:
        if (uniform(rng, 0, 1) < 0.5) {
          count = 1;
          target = uniform(rng, 0.1, 0.6) * spec.threshold_ab;
        }
        break;
      case Grade::B:
        count = 1 + static_cast<int>(uniform_index(rng, 3));
        target = uniform(rng, 2.0 * spec.threshold_ab, 0.7 * spec.threshold_bc);
        break;
      case Grade::C:
        count = 4 + static_cast<int>(uniform_index(rng, 6));
        target = uniform(rng, 1.5 * spec.threshold_bc, 4.0 * spec.threshold_bc);
        break;
    }
    for (int k = 0; k < count; ++k) {
      const double r = std::sqrt(target * area / count / std::numbers::pi) * uniform(rng, 0.85, 1.15);
      const double rho = 0.7 * std::sqrt(uniform(rng, 0, 1)), phi = uniform(rng, 0, 2 * std::numbers::pi);
      const double u = rho * std::cos(phi), v = rho * std::sin(phi);
      const double c = std::cos(fruit.angle), s = std::sin(fruit.angle);
      const double x = fruit.cx + c * u * fruit.rx - s * v * fruit.ry;
      const double y = fruit.cy + s * u * fruit.rx + c * v * fruit.ry;
      d.dots.push_back({x, y, r});
    }
    std::size_t covered = 0;
    for (const auto& [x, y] : fruit_px) {
      for (const auto& dot : d.dots)
        if (std::hypot(x + 0.5 - dot[0], y + 0.5 - dot[1]) <= dot[2]) {
          ++covered;
          break;
        }
    }
    d.fraction = static_cast<double>(covered) / area;
    if (grade_from_defect_area(d.fraction, spec) == want) return d;
  }
  throw DataError("synth: could not realise the requested grade; image too small for the thresholds");
}

struct Rendered {
  ByteImage image;
  BinaryMask mask;
  Defects defects;
};

Rendered render(Grade want, const SynthSpec& spec, Rng& rng) {
  const int s = spec.image_size;
  Canvas cv(s, {0, 0, 0});
  paint_background(cv, spec, rng);

  const bool clutter = spec.background == SynthSpec::Background::Cluttered;
  const auto& range = clutter ? spec.cluttered_radius : spec.radius;
  Ellipse fruit{};
  fruit.rx = uniform(rng, range[0], range[1]) * s;
  fruit.ry = fruit.rx * uniform(rng, 0.75, 0.95);
  fruit.angle = uniform(rng, 0, std::numbers::pi);
  if (clutter) {
    fruit.cx = uniform(rng, fruit.rx + 1, s - fruit.rx - 1);
    fruit.cy = uniform(rng, fruit.rx + 1, s - fruit.rx - 1);
  } else {
    fruit.cx = s / 2.0 + uniform(rng, -0.05, 0.05) * s;
    fruit.cy = s / 2.0 + uniform(rng, -0.05, 0.05) * s;
  }
  const Rgb base = lerp({0.70, 0.78, 0.22}, {0.96, 0.62, 0.12}, uniform(rng, 0, 1));

  Rendered out{ByteImage(s, s, 3), BinaryMask(s, s), {}};
  std::vector<std::pair<int, int>> fruit_px;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      if (fruit.contains(x + 0.5, y + 0.5)) {
        out.mask.set(x, y, true);
        fruit_px.emplace_back(x, y);
        // soft highlight towards the upper left
        const auto [u, v] = fruit.local(x + 0.5, y + 0.5);
        const double shade = 0.78 + 0.22 * (1.0 - (u * u + v * v)) - 0.08 * (x - fruit.cx + y - fruit.cy) / fruit.rx;
        cv.at(x, y) = {base[0] * shade, base[1] * shade, base[2] * shade};
      }
  out.defects = draw_defects(want, fruit, fruit_px, spec, rng);
  const Rgb dark{uniform(rng, 0.22, 0.32), uniform(rng, 0.14, 0.20), uniform(rng, 0.05, 0.09)};
  for (const auto& [x, y] : fruit_px)
    for (const auto& dot : out.defects.dots)
      if (std::hypot(x + 0.5 - dot[0], y + 0.5 - dot[1]) <= dot[2]) {
        cv.at(x, y) = dark;
        break;
      }

  std::normal_distribution<double> noise(0.0, 0.015);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(cv.at(x, y)[static_cast<std::size_t>(c)] + noise(rng), 0.0, 1.0);
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return out;
}

}  // namespace

std::vector<SynthRecord> generate_synthetic(const std::filesystem::path& root, const SynthSpec& spec) {
  spec.validate();
  const char* names[3] = {"train", "val", "test"};
  std::vector<SynthRecord> records;
  for (std::uint64_t split = 0; split < 3; ++split) {
    const auto dir = root / names[split];
    std::filesystem::create_directories(dir);
    const int n = spec.n[split];
    const auto counts = grade_allocation(n, spec.grade_mix);
    std::vector<Grade> grades;
    for (std::size_t g = 0; g < 3; ++g) grades.insert(grades.end(), static_cast<std::size_t>(counts[g]), static_cast<Grade>(g));
    Rng order_rng(derive_seed(spec.seed, {split, 0xa11}));
    for (std::size_t i = grades.size(); i > 1; --i) std::swap(grades[i - 1], grades[uniform_index(order_rng, i)]);

    DatasetManifest manifest{names[split], dir, {}};
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(spec.seed, {10 + split, static_cast<std::uint64_t>(i)}));
      const Grade truth = grades[static_cast<std::size_t>(i)];
      auto r = render(truth, spec, rng);
      Grade label = truth;
      if (spec.label_noise > 0.0 && uniform(rng, 0, 1) < spec.label_noise) {
        label = static_cast<Grade>((static_cast<int>(truth) + 1 + static_cast<int>(uniform_index(rng, 2))) % 3);
      }
      char stem[32];
      std::snprintf(stem, sizeof stem, "img_%05d", i);
      const std::string file = std::string(stem) + ".png";
      write_png(dir / file, r.image);
      write_mask(dir / (std::string(stem) + ".mask.png"), r.mask);
      manifest.entries.push_back({file, dir / file, label, dir / (std::string(stem) + ".mask.png")});
      records.push_back({names[split], file, label, truth, r.defects.fraction, static_cast<int>(r.defects.dots.size())});
    }
    write_manifest(dir, manifest);
  }

  std::ofstream report(root / "synth_report.csv", std::ios::binary | std::ios::trunc);
  if (!report) throw DataError("cannot write " + (root / "synth_report.csv").string());
  report << "split,filename,label,true_grade,defect_fraction,defects\n";
  for (const auto& r : records) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", r.defect_fraction);
    report << r.split << ',' << r.filename << ',' << grade_char(r.grade) << ',' << grade_char(r.true_grade) << ','
           << buf << ',' << r.defects << '\n';
  }
  if (!report.flush()) throw DataError("write failed: synth_report.csv");
  return records;
}

}  // namespace mg
