#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "mg/checkpoint.hpp"
#include "mg/cli.hpp"
#include "mg/image.hpp"
#include "mg/model_check.hpp"
#include "mg/ops.hpp"
#include "mg/preprocess.hpp"

namespace mg {

namespace fs = std::filesystem;

namespace {

constexpr const char* kModelFile = "model.mgck";
constexpr const char* kHistoryFile = "history.csv";
constexpr const char* kSynthReport = "synth_report.csv";
constexpr const char* kSplits[] = {"train", "val", "test"};

std::uint64_t get_seed(const RunConfig& cfg, const std::string& key = "seed") {
  const auto& text = cfg.get(key);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw UsageError("--" + key + " must be an unsigned integer");
  return v;
}

std::string choice(const RunConfig& cfg, const std::string& key, std::initializer_list<const char*> allowed) {
  const auto& v = cfg.get(key);
  for (const char* a : allowed)
    if (v == a) return v;
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : "|") + a;
  throw UsageError("--" + key + " must be one of " + list + ", got '" + v + "'");
}

std::ofstream open_text(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  return out;
}

void close_text(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw DataError("write failed: " + path.string());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool is_split_dir(const fs::path& dir) { return fs::exists(dir / kLabelsFile); }

/// (split name, directory) for a dataset root, or the single directory holding labels.csv.
std::vector<std::pair<std::string, fs::path>> split_dirs(const fs::path& root) {
  if (is_split_dir(root)) return {{root.filename().string(), root}};
  std::vector<std::pair<std::string, fs::path>> out;
  for (const char* s : kSplits)
    if (is_split_dir(root / s)) out.emplace_back(s, root / s);
  if (out.empty()) throw DataError("no labels.csv under " + root.string());
  return out;
}

DatasetManifest load_split(const fs::path& data, const std::string& split, std::ostream& log) {
  if (is_split_dir(data)) return load_manifest(data, split, &log);
  if (!fs::is_directory(data / split)) throw DataError("missing split directory " + (data / split).string());
  return load_manifest(data / split, split, &log);
}

Tensor stack_units(std::span<const Sample> samples) {
  const auto& s = samples.front().image.shape();
  Tensor out({static_cast<std::int64_t>(samples.size()), s[0], s[1], s[2]});
  auto dst = out.data();
  std::size_t at = 0;
  for (const auto& x : samples) {
    const auto src = x.image.data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(at));
    at += src.size();
  }
  return out;
}

/// Mean squared reconstruction error against the unscaled images, eval mode.
double reconstruction_mse(Network& net, const SampleSet& samples, const ScalingScheme& scaling) {
  const Mode saved = net.mode();
  net.set_mode(Mode::Eval);
  double sum = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::span<const Sample> part(samples.data() + start, std::min(kChunk, samples.size() - start));
    Tape quiet(false);
    const auto f = net.forward(quiet, make_batch(part, scaling), false);
    sum += static_cast<double>(mse_loss(quiet, f.reconstruction, stack_units(part)).item()) *
           static_cast<double>(part.size());
  }
  net.set_mode(saved);
  return sum / static_cast<double>(samples.size());
}

ScalingScheme scaling_from(const RunConfig& cfg, const SampleSet& train) {
  const auto kind = choice(cfg, "scaling", {"simple", "dataset", "fixed"});
  if (kind == "simple") return ScalingScheme::simple_shift_scale();
  if (kind == "fixed") return ScalingScheme::fixed_normalize();
  std::vector<ByteImage> images;
  images.reserve(train.size());
  for (const auto& s : train) images.push_back(from_unit_tensor(s.image));
  const auto st = compute_dataset_stats(images);
  std::array<float, 3> mean{}, sd{};
  for (std::size_t c = 0; c < 3; ++c) {
    mean[c] = static_cast<float>(st.mean[c]);
    sd[c] = static_cast<float>(st.std[c]);
  }
  return ScalingScheme::dataset_normalize(mean, sd);
}

/// Defect area per sample from a synth report beside the data, keyed by filename.
std::map<std::string, double> defect_reference(const fs::path& data, const std::string& split) {
  const fs::path report = is_split_dir(data) ? data.parent_path() / kSynthReport : data / kSynthReport;
  std::map<std::string, double> out;
  std::ifstream in(report);
  if (!in) return out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream row(line);
    std::string item;
    while (std::getline(row, item, ',')) f.push_back(item);
    if (f.size() >= 5 && f[0] == split) out[f[1]] = std::strtod(f[4].c_str(), nullptr);
  }
  return out;
}

fs::path default_out(const RunConfig& cfg, const std::string& leaf) {
  if (cfg.has("out")) return cfg.get("out");
  return fs::path(cfg.get("checkpoint")).parent_path() / leaf;
}

}  // namespace

// ---- model files ----------------------------------------------------------------------------

void save_model(const fs::path& path, const Network& net, const ScalingScheme& scaling) {
  auto all = network_meta(net);
  std::vector<float> prep{static_cast<float>(scaling.kind)};
  prep.insert(prep.end(), scaling.mean.begin(), scaling.mean.end());
  prep.insert(prep.end(), scaling.std.begin(), scaling.std.end());
  all.push_back({"prep.scaling", Tensor({7}, std::move(prep))});
  for (auto& e : net.state_dict()) all.push_back(std::move(e));
  save_tensors(path, all);
}

TrainedModel load_model(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw CheckpointError("checkpoint not found: " + path.string());
  const auto tensors = load_tensors(path);
  Network net = build_from_meta(tensors);
  try {
    net.load_state_dict(tensors);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  net.set_mode(Mode::Eval);
  ScalingScheme scaling;
  for (const auto& e : tensors) {
    if (e.name != "prep.scaling") continue;
    if (e.tensor.numel() != 7) throw CheckpointError(path.string() + ": malformed prep.scaling");
    const auto v = e.tensor.data();
    const int kind = static_cast<int>(v[0]);
    if (kind < 0 || kind > 2) throw CheckpointError(path.string() + ": unknown scaling kind");
    scaling.kind = static_cast<ScalingScheme::Kind>(kind);
    for (std::size_t c = 0; c < 3; ++c) {
      scaling.mean[c] = v[1 + c];
      scaling.std[c] = v[4 + c];
    }
  }
  return {std::move(net), scaling};
}

// ---- synth ---------------------------------------------------------------------------------

std::vector<SynthRecord> cmd_synth(const RunConfig& cfg, std::ostream& log) {
  cfg.check_required();
  SynthSpec spec;
  spec.seed = get_seed(cfg);
  if (cfg.has("counts")) {
    const auto c = cfg.get_ints("counts");
    if (c.size() != 3) throw UsageError("--counts needs train,val,test");
    spec.n = {c[0], c[1], c[2]};
  } else {
    const auto f = cfg.get_doubles("fractions");
    if (f.size() != 3) throw UsageError("--fractions needs train,val,test");
    const int n = cfg.get_int("n");
    if (n < 1) throw UsageError("--n must be >= 1");
    double total = 0.0;
    for (double x : f) {
      if (x < 0.0) throw UsageError("--fractions must be non-negative");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw UsageError("--fractions must sum to 1");
    spec.n = grade_allocation(n, {f[0], f[1], f[2]});
  }
  spec.image_size = cfg.get_int("size");
  spec.background = choice(cfg, "background", {"plain", "cluttered"}) == "plain" ? SynthSpec::Background::Plain
                                                                                 : SynthSpec::Background::Cluttered;
  const auto mix = cfg.get_doubles("grade_mix");
  if (mix.size() != 3) throw UsageError("--grade-mix needs A,B,C shares");
  spec.grade_mix = {mix[0], mix[1], mix[2]};
  spec.label_noise = cfg.get_double("label_noise");
  try {
    spec.validate();
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }

  const fs::path out = cfg.get("out");
  const auto records = generate_synthetic(out, spec);
  log_run_config(out, cfg);
  std::array<std::array<int, 3>, 3> counts{};
  for (const auto& r : records) {
    const auto split = static_cast<std::size_t>(std::find(std::begin(kSplits), std::end(kSplits), r.split) - kSplits);
    if (split < 3) ++counts[split][static_cast<std::size_t>(r.grade)];
  }
  log << "synth: " << records.size() << " images in " << out.string() << "\n";
  for (std::size_t s = 0; s < 3; ++s) {
    log << "  " << kSplits[s] << ": A " << counts[s][0] << ", B " << counts[s][1] << ", C " << counts[s][2] << "\n";
  }
  return records;
}

// ---- segment -------------------------------------------------------------------------------

SegmentSummary cmd_segment(const RunConfig& cfg, std::ostream& log) {
  cfg.check_required();
  const bool use_canny = choice(cfg, "method", {"mask", "canny"}) == "canny";
  const bool bbox_mode = choice(cfg, "mode", {"bbox", "splash"}) == "bbox";
  CannyParams canny;
  canny.low = static_cast<float>(cfg.get_double("low"));
  canny.high = static_cast<float>(cfg.get_double("high"));
  canny.sigma = static_cast<float>(cfg.get_double("sigma"));
  const auto margin = static_cast<float>(cfg.get_double("margin"));
  if (margin < 0.0f) throw UsageError("--margin must be >= 0");
  if (!(canny.low >= 0.0f && canny.low <= canny.high) || !(canny.sigma > 0.0f)) {
    throw UsageError("canny thresholds need 0 <= low <= high and sigma > 0");
  }

  const fs::path in = cfg.get("in"), out = cfg.get("out");
  const bool single = is_split_dir(in);
  const auto dirs = split_dirs(in);
  fs::create_directories(out);
  const auto report_path = out / "segment_report.csv";
  auto report = open_text(report_path);
  report << "split,filename,status,x_min,y_min,x_max,y_max,foreground_fraction\n";

  SegmentSummary summary;
  for (const auto& [split, dir] : dirs) {
    const auto manifest = load_manifest(dir, split, &log);
    const fs::path dst = single ? out : out / split;
    fs::create_directories(dst);
    DatasetManifest kept{split, dst, {}};
    for (const auto& e : manifest.entries) {
      const Tensor unit = to_unit_tensor(read_image(e.image));
      const int h = static_cast<int>(unit.dim(1)), w = static_cast<int>(unit.dim(2));
      BinaryMask mask;
      if (use_canny) {
        mask = fill_enclosed(canny_segment(to_grayscale(unit), canny));
      } else {
        if (!e.mask) throw DataError("--method mask needs " + fs::path(e.filename).stem().string() + ".mask.png");
        mask = read_mask(*e.mask);
        if (mask.width != w || mask.height != h) throw DataError("mask size differs from image: " + e.filename);
      }
      const double fg = static_cast<double>(mask.count()) / (static_cast<double>(w) * h);
      if (mask.count() == 0) {
        ++summary.skipped;
        log << "warning: " << split << "/" << e.filename << ": empty " << (use_canny ? "edge set" : "mask")
            << ", skipped\n";
        report << split << "," << e.filename << ",skipped,,,,," << fmt("%.6f", fg) << "\n";
        continue;
      }
      const auto box = mask_to_bbox(mask);
      const auto grown = expand_bbox(box, margin, w, h);
      Tensor result;
      BinaryMask out_mask;
      if (bbox_mode) {
        result = crop_to_bbox(unit, box, margin);
        out_mask = BinaryMask(grown.width(), grown.height());
        for (int y = 0; y < grown.height(); ++y)
          for (int x = 0; x < grown.width(); ++x) out_mask.set(x, y, mask.at(grown.x_min + x, grown.y_min + y));
      } else {
        result = apply_splash(unit, mask);
        out_mask = mask;
      }
      const std::string stem = fs::path(e.filename).stem().string();
      const std::string name = stem + ".png";
      write_png(dst / name, from_unit_tensor(result));
      write_mask(dst / (stem + ".mask.png"), out_mask);
      kept.entries.push_back({name, dst / name, e.grade, dst / (stem + ".mask.png")});
      report << split << "," << e.filename << ",ok," << grown.x_min << "," << grown.y_min << "," << grown.x_max << ","
             << grown.y_max << "," << fmt("%.6f", fg) << "\n";
      ++summary.processed;
    }
    write_manifest(dst, kept);
  }
  close_text(report, report_path);
  if (!single && fs::exists(in / kSynthReport)) {
    fs::copy_file(in / kSynthReport, out / kSynthReport, fs::copy_options::overwrite_existing);
  }
  log_run_config(out, cfg);
  log << "segment: " << summary.processed << " written, " << summary.skipped << " skipped";
  if (summary.skipped > 0) log << " (" << summary.skipped << " warnings)";
  log << "\n";
  return summary;
}

// ---- train ---------------------------------------------------------------------------------

TrainSummary cmd_train(const RunConfig& config, std::ostream& log) {
  config.check_required();
  RunConfig cfg = config;
  const bool convae = choice(cfg, "model", {"cnn", "convae"}) == "convae";
  if (cfg.get("batch_size") == "auto") cfg.set("batch_size", convae ? "64" : "32");
  if (cfg.get("schedule") == "auto") cfg.set("schedule", convae ? "plateau" : "none");
  const auto seed = get_seed(cfg);
  const fs::path data = cfg.get("data"), out = cfg.get("out");

  VggStyleConfig enc;
  enc.block_channels = cfg.get_ints("block_channels");
  enc.convs_per_block = cfg.get_ints("convs_per_block");
  enc.fc_dims = cfg.get_ints("fc_dims");
  enc.input_size = cfg.get_int("image_size");
  enc.residual = cfg.get_bool("residual");
  enc.dropout_rate = static_cast<float>(cfg.get_double("dropout"));

  TrainConfig tc;
  const auto opt = choice(cfg, "optimizer", {"adam", "sgd"});
  tc.optimizer = opt == "adam" ? OptimizerConfig::adam(cfg.get_double("lr"))
                               : OptimizerConfig::sgd(cfg.get_double("lr"), cfg.get_double("momentum"));
  const auto sched = choice(cfg, "schedule", {"none", "step", "plateau"});
  tc.schedule.kind = sched == "none"   ? ScheduleConfig::Kind::None
                     : sched == "step" ? ScheduleConfig::Kind::StepDecay
                                       : ScheduleConfig::Kind::ReduceOnPlateau;
  tc.schedule.step_every = cfg.get_int("step_every");
  tc.schedule.step_factor = cfg.get_double("step_factor");
  tc.schedule.plateau_patience = cfg.get_int("plateau_patience");
  tc.schedule.plateau_factor = cfg.get_double("plateau_factor");
  tc.batch_size = cfg.get_int("batch_size");
  tc.max_epochs = cfg.get_int("max_epochs");
  tc.early_stop_patience = cfg.get_int("early_stop_patience");
  tc.augment = cfg.get_bool("augment");
  tc.seed = seed;
  tc.verbose = cfg.get_bool("verbose");

  Rng init(derive_seed(seed, {0x1417}));
  std::optional<Network> net;
  try {
    if (convae) {
      ConvAeClfConfig c;
      c.encoder = enc;
      c.classifier_dims = cfg.get_ints("classifier_dims");
      c.alpha = static_cast<float>(cfg.get_double("alpha"));
      c.classifier_dropout = static_cast<float>(cfg.get_double("classifier_dropout"));
      tc.alpha = c.alpha;
      net.emplace(build_convae_clf(c, init));
    } else {
      net.emplace(build_single_task_cnn(enc, init));
    }
    tc.validate();
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }

  const auto train_m = load_split(data, "train", log);
  const auto val_m = load_split(data, "val", log);
  const bool has_test = is_split_dir(data / "test");
  const auto train = load_samples(train_m, enc.input_size);
  const auto val = load_samples(val_m, enc.input_size);
  if (train.empty() || val.empty()) throw DataError("train and val splits must be non-empty");
  tc.scaling = scaling_from(cfg, train);

  log_run_config(out, cfg);
  log << "train: " << (convae ? "convae" : "cnn") << ", " << net->parameter_count() << " parameters, " << train.size()
      << " train / " << val.size() << " val images\n";

  const auto result = train_loop(*net, train, val, tc);

  TrainSummary s;
  s.checkpoint = out / kModelFile;
  s.history = out / kHistoryFile;
  save_model(s.checkpoint, *net, tc.scaling);
  write_history_csv(s.history, result.history, convae);
  s.best_epoch = result.best_epoch;
  s.best_val_acc = result.best_val_acc;
  s.epochs_run = static_cast<int>(result.history.size());
  s.early_stopped = result.early_stopped;
  if (convae) s.final_recon_loss = reconstruction_mse(*net, val, tc.scaling);
  if (has_test) {
    const auto test = load_samples(load_manifest(data / "test", "test", &log), enc.input_size);
    if (!test.empty()) s.test_acc = evaluate(*net, test, tc.scaling).accuracy;
  }
  log << "train: " << s.epochs_run << " epochs" << (s.early_stopped ? " (early stop)" : "") << ", best epoch "
      << s.best_epoch << ", val acc " << fmt("%.4f", s.best_val_acc);
  if (s.test_acc >= 0.0) log << ", test acc " << fmt("%.4f", s.test_acc);
  if (convae) log << ", val recon mse " << fmt("%.5f", s.final_recon_loss);
  log << "\n";
  return s;
}

// ---- eval ----------------------------------------------------------------------------------

EvalSummary cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.check_required();
  auto model = load_model(cfg.get("checkpoint"));
  const auto split = choice(cfg, "split", {"train", "val", "test"});
  const auto manifest = load_split(cfg.get("data"), split, log);
  const auto samples = load_samples(manifest, model.net.encoder_config().input_size);
  if (samples.empty()) throw DataError("split " + split + " has no samples");
  const auto r = evaluate(model.net, samples, model.scaling);

  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  EvalSummary summary;
  summary.confusion = confusion_matrix(r.predictions, labels);
  summary.accuracy = summary.confusion.accuracy();

  const auto out = default_out(cfg, "eval_" + split);
  fs::create_directories(out);
  summary.confusion_csv = out / "confusion.csv";
  write_confusion_csv(summary.confusion_csv, summary.confusion);
  const auto pred_path = out / "predictions.csv";
  auto pred = open_text(pred_path);
  pred << "filename,grade,predicted,p_A,p_B,p_C\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred << samples[i].id << "," << grade_char(static_cast<Grade>(samples[i].label)) << ","
         << grade_char(static_cast<Grade>(r.predictions[i]));
    for (float p : r.probabilities[i]) pred << "," << fmt("%.6f", p);
    pred << "\n";
  }
  close_text(pred, pred_path);
  log_run_config(out, cfg);
  return summary;
}

// ---- explain -------------------------------------------------------------------------------

ExplainSummary cmd_explain(const RunConfig& cfg, std::ostream& log) {
  cfg.check_required();
  auto model = load_model(cfg.get("checkpoint"));
  const auto split = choice(cfg, "split", {"train", "val", "test"});
  const auto mode = choice(cfg, "mode", {"saliency", "pca", "rank"});
  const fs::path data = cfg.get("data");
  const auto manifest = load_split(data, split, log);
  const auto samples = load_samples(manifest, model.net.encoder_config().input_size);
  if (samples.empty()) throw DataError("split " + split + " has no samples");

  ExplainSummary s;
  s.out_dir = default_out(cfg, "explain_" + mode + "_" + split);
  fs::create_directories(s.out_dir);

  if (mode == "saliency") {
    const int limit = cfg.get_int("limit");
    const std::size_t n = limit > 0 ? std::min(samples.size(), static_cast<std::size_t>(limit)) : samples.size();
    const auto index_path = s.out_dir / "saliency_index.csv";
    auto index = open_text(index_path);
    index << "filename,grade,predicted,probability,max_saliency\n";
    for (std::size_t i = 0; i < n; ++i) {
      const auto map = saliency_map(model.net, scale_unit_image(samples[i].image, model.scaling));
      write_saliency(s.out_dir, fs::path(samples[i].id).stem().string(), map);
      s.files_written += 2;
      index << samples[i].id << "," << grade_char(static_cast<Grade>(samples[i].label)) << ","
            << grade_char(static_cast<Grade>(map.predicted)) << "," << fmt("%.6f", map.probability) << ","
            << fmt("%.6g", map.max()) << "\n";
    }
    close_text(index, index_path);
    log << "explain: " << n << " saliency maps in " << s.out_dir.string() << "\n";
  } else if (mode == "pca") {
    const int k = cfg.get_int("components");
    const auto features = extract_latent(model.net, make_batch(samples, model.scaling));
    PcaModel pca;
    try {
      pca = pca_fit(features, k);
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
    // PC1 is signed so that it grows with defect area (grade ordinal when no synth report is available)
    const auto defects = defect_reference(data, split);
    std::vector<double> reference;
    bool from_report = !defects.empty();
    for (const auto& x : samples) {
      const auto it = defects.find(x.id);
      if (it == defects.end()) from_report = false;
      reference.push_back(it == defects.end() ? 0.0 : it->second);
    }
    if (!from_report)
      for (std::size_t i = 0; i < samples.size(); ++i) reference[i] = samples[i].label;
    orient_components(pca, features, reference);
    const auto coeffs = pca_project(pca, features);
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (const auto& x : samples) {
      ids.push_back(x.id);
      labels.push_back(x.label);
    }
    write_pca_csv(s.out_dir, pca, coeffs, ids, labels);
    s.files_written = 2;
    std::array<double, 3> sum{};
    std::array<int, 3> count{};
    for (std::size_t i = 0; i < samples.size(); ++i) {
      sum[static_cast<std::size_t>(labels[i])] += coeffs(static_cast<std::int64_t>(i), 0);
      ++count[static_cast<std::size_t>(labels[i])];
    }
    for (std::size_t g = 0; g < 3; ++g) {
      s.mean_pc1[g] = count[g] > 0 ? sum[g] / count[g] : std::numeric_limits<double>::quiet_NaN();
    }
    log << "explain: pca on " << samples.size() << " latent vectors of width " << features.cols
        << ", explained ratio";
    for (double r : pca.explained_ratio) log << " " << fmt("%.4f", r);
    log << "\n  PC1 oriented by " << (from_report ? "defect area" : "grade") << "; mean PC1 A "
        << fmt("%.4f", s.mean_pc1[0]) << ", B " << fmt("%.4f", s.mean_pc1[1]) << ", C " << fmt("%.4f", s.mean_pc1[2])
        << "\n";
  } else {
    s.ranked = rank_misclassified(model.net, samples, model.scaling);
    const auto path = s.out_dir / "misclassified.csv";
    auto f = open_text(path);
    f << "rank,filename,grade,predicted,loss\n";
    for (std::size_t i = 0; i < s.ranked.size(); ++i) {
      const auto& m = s.ranked[i];
      f << i + 1 << "," << m.id << "," << grade_char(static_cast<Grade>(m.label)) << ","
        << grade_char(static_cast<Grade>(m.predicted)) << "," << fmt("%.6f", m.loss) << "\n";
    }
    close_text(f, path);
    s.files_written = 1;
    log << "explain: " << s.ranked.size() << " of " << samples.size() << " misclassified\n";
  }
  log_run_config(s.out_dir, cfg);
  return s;
}

// ---- gradcheck -----------------------------------------------------------------------------

GradCheckSummary cmd_gradcheck(const RunConfig& cfg, std::ostream& log) {
  cfg.check_required();
  const auto which = choice(cfg, "model", {"cnn", "convae", "all"});
  const auto seed = get_seed(cfg);
  const int size = cfg.get_int("size");
  const int batch = cfg.get_int("batch");
  if (batch < 1) throw UsageError("--batch must be >= 1");
  GradCheckOptions opt;
  opt.step = cfg.get_double("step");
  opt.max_coords_per_tensor = cfg.get_int("coords");
  opt.seed = seed;
  GradCheckSummary summary;
  summary.tolerance = cfg.get_double("tolerance");

  Rng data_rng(derive_seed(seed, {1}));
  Tensor x({batch, 3, size, size});
  for (auto& v : x.data()) v = static_cast<float>(uniform(data_rng, 0.0, 1.0));
  std::vector<int> labels;
  for (int i = 0; i < batch; ++i) labels.push_back(static_cast<int>(uniform_index(data_rng, kNumGrades)));

  std::vector<std::string> kinds;
  if (which != "convae") kinds.push_back("cnn");
  if (which != "cnn") kinds.push_back("convae");
  for (const auto& kind : kinds) {
    Rng init(derive_seed(seed, {2, kind == "cnn" ? 0u : 1u}));
    VggStyleConfig enc = VggStyleConfig::desk();
    enc.input_size = size;
    std::optional<Network> net;
    try {
      if (kind == "cnn") {
        net.emplace(build_single_task_cnn(enc, init));
      } else {
        ConvAeClfConfig c = ConvAeClfConfig::desk();
        c.encoder = enc;
        net.emplace(build_convae_clf(c, init));
      }
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
    if (cfg.get_bool("inject_fault")) {
      // negative control: a gradient that is wrong by a constant offset
      Tensor victim = net->parameters().front().tensor;
      opt.after_backward = [victim]() mutable {
        for (auto& g : victim.grad()) g = 1.5f * g + 0.1f;
      };
    }
    const auto report = check_network_gradients(*net, x, labels, opt);
    summary.max_rel_error = std::max(summary.max_rel_error, report.max_rel_error);
    log << "gradcheck " << kind << " (" << size << "x" << size << ", batch " << batch << "): max rel error "
        << fmt("%.3e", report.max_rel_error) << "\n";
    for (const auto& t : report.tensors) {
      log << "  " << t.name << "  " << fmt("%.3e", t.max_rel_error) << "  (" << t.coords_checked << " coords)\n";
    }
    summary.models.emplace_back(kind, report);
  }
  summary.passed = summary.max_rel_error < summary.tolerance;

  if (cfg.has("out")) {
    const fs::path out = cfg.get("out");
    fs::create_directories(out);
    const auto path = out / "gradcheck_report.csv";
    auto f = open_text(path);
    f << "model,tensor,max_rel_error,analytic,numeric,coords,kinks_straddled\n";
    for (const auto& [kind, report] : summary.models)
      for (const auto& t : report.tensors) {
        f << kind << "," << t.name << "," << fmt("%.6e", t.max_rel_error) << "," << fmt("%.9g", t.analytic) << ","
          << fmt("%.9g", t.numeric) << "," << t.coords_checked << "," << t.kinks_straddled << "\n";
      }
    close_text(f, path);
    log_run_config(out, cfg);
  }
  log << "gradcheck: " << (summary.passed ? "PASS" : "FAIL") << " (max " << fmt("%.3e", summary.max_rel_error)
      << ", tolerance " << fmt("%.1e", summary.tolerance) << ")\n";
  return summary;
}

}  // namespace mg
