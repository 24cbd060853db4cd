// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--work DIR] [criterion numbers...]
// With no numbers every criterion runs. Exit status is 1 when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "../canny_oracle.hpp"
#include "mg/cli.hpp"
#include "mg/model_check.hpp"
#include "mg/ops.hpp"

using namespace mg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

RunConfig config(const std::string& command, std::initializer_list<std::pair<const char*, std::string>> kv) {
  auto cfg = make_config(command);
  for (const auto& [k, v] : kv) cfg.set(k, v);
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double median3(std::array<double, 3> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

// Shared state: datasets and the plain-background model are built once.
class Context {
 public:
  explicit Context(fs::path work) : work_(std::move(work)) { fs::create_directories(work_); }

  const fs::path& work() const { return work_; }
  std::ostream& log() { return log_; }

  fs::path dataset(const std::string& name, const std::string& background, std::uint64_t seed, const std::string& counts,
                   int size) {
    const auto dir = work_ / name;
    if (!fs::exists(dir / "run_config.txt")) {
      cmd_synth(config("synth", {{"out", dir.string()},
                                 {"seed", std::to_string(seed)},
                                 {"counts", counts},
                                 {"size", std::to_string(size)},
                                 {"background", background}}),
                log_);
    }
    return dir;
  }

  fs::path plain() { return dataset("plain", "plain", 1, "300,60,60", 64); }

  // Desk CNN on the plain set under the default recipe (criterion 2, reused by 4 and 6).
  const TrainSummary& plain_cnn() {
    if (!plain_cnn_) {
      const auto t0 = std::chrono::steady_clock::now();
      plain_cnn_ = cmd_train(config("train", {{"data", plain().string()},
                                              {"out", (work_ / "plain_cnn").string()},
                                              {"seed", "1"},
                                              {"model", "cnn"},
                                              {"image_size", "64"}}),
                             log_);
      plain_cnn_seconds_ = seconds_since(t0);
    }
    return *plain_cnn_;
  }
  double plain_cnn_seconds() const { return plain_cnn_seconds_; }

 private:
  fs::path work_;
  std::ostringstream log_;
  std::optional<TrainSummary> plain_cnn_;
  double plain_cnn_seconds_ = 0.0;
};

// ---- 1: gradient correctness ------------------------------------------------------------

// Random weights made orthogonal to the layer's output at the base point, so
// the projected loss is ~0 there. Its float32 rounding then stays far below
// the step's resolution while every output keeps an O(1) weight.
Tensor centred_weights(const Tensor& y0, std::uint64_t seed) {
  Tensor w = random_tensor(y0.shape(), seed);
  double wy = 0.0, yy = 0.0;
  for (std::int64_t i = 0; i < y0.numel(); ++i) {
    wy += static_cast<double>(w.at(i)) * y0.at(i);
    yy += static_cast<double>(y0.at(i)) * y0.at(i);
  }
  if (yy > 0.0)
    for (std::int64_t i = 0; i < y0.numel(); ++i) w.at(i) -= static_cast<float>(wy / yy * y0.at(i));
  return w;
}

Outcome gradient_correctness(Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opt;
  opt.step = 1e-3;
  opt.max_coords_per_tensor = 64;
  opt.seed = 7;
  std::map<std::string, double> worst;
  auto check_layer = [&](const std::string& name, const std::function<Tensor(Tape&)>& layer,
                         std::vector<NamedTensor> wrt, std::uint64_t seed) {
    Tape quiet(false);
    const Tensor w = centred_weights(layer(quiet), seed);
    const auto r = grad_check([&](Tape& t) { return sum(t, mul(t, layer(t), w)); }, std::move(wrt), opt);
    worst[name] = std::max(worst[name], r.max_rel_error);
  };

  // every layer type on small fixtures, five seeds; float32 sums over large
  // activations put finite-difference noise at the tolerance
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = seed * 100;
    opt.seed = s;
    {
      auto x = random_tensor({2, 3, 6, 5}, s + 1, 0.0, 1.0);
      auto k = random_tensor({4, 3, 3, 3}, s + 2);
      auto b = random_tensor({4}, s + 3);
      check_layer("conv2d 3x3", [&](Tape& t) { return conv2d(t, x, k, b, 1, 1); }, {{"x", x}, {"kernel", k}, {"bias", b}},
                  s + 4);
      check_layer("conv2d 3x3 stride 2", [&](Tape& t) { return conv2d(t, x, k, b, 2, 1); },
                  {{"x", x}, {"kernel", k}, {"bias", b}}, s + 5);
      auto k1 = random_tensor({4, 3, 1, 1}, s + 6);
      check_layer("conv2d 1x1", [&](Tape& t) { return conv2d(t, x, k1, b); }, {{"x", x}, {"kernel", k1}, {"bias", b}},
                  s + 7);
    }
    {
      auto x = random_tensor({3, 4, 3, 3}, s + 8);
      auto gamma = random_tensor({4}, s + 9, 0.5, 1.5);
      auto beta = random_tensor({4}, s + 10);
      for (auto mode : {Mode::Train, Mode::Eval}) {
        check_layer(mode == Mode::Train ? "batch_norm2d (train)" : "batch_norm2d (eval)",
                    [&](Tape& t) {
                      BatchNormState st{Tensor({4}, 0.1f), Tensor({4}, 0.9f)};
                      return batch_norm2d(t, x, gamma, beta, st, mode);
                    },
                    {{"x", x}, {"gamma", gamma}, {"beta", beta}}, s + 11);
      }
    }
    {
      auto x = random_tensor({2, 2, 4, 4}, s + 12);
      check_layer("relu", [&](Tape& t) { return relu(t, x); }, {{"x", x}}, s + 13);
      check_layer("leaky_relu", [&](Tape& t) { return leaky_relu(t, x, 0.01f); }, {{"x", x}}, s + 14);
      check_layer("sigmoid", [&](Tape& t) { return sigmoid(t, x); }, {{"x", x}}, s + 15);
      check_layer("max_pool2d", [&](Tape& t) { return max_pool2d(t, x, 2, 2); }, {{"x", x}}, s + 16);
      check_layer("dropout",
                  [&](Tape& t) {
                    Rng rng(s + 17);
                    return dropout(t, x, 0.5f, Mode::Train, rng);
                  },
                  {{"x", x}}, s + 18);
    }
    {
      auto x = random_tensor({2, 3, 2, 3}, s + 19);
      auto skip = random_tensor({2, 2, 4, 6}, s + 20);
      auto k = random_tensor({3, 5, 3, 3}, s + 21);
      auto b = random_tensor({3}, s + 22);
      for (auto act : {ActivationSpec{Activation::LeakyRelu, 0.01f}, ActivationSpec{Activation::Sigmoid}}) {
        check_layer(act.kind == Activation::Sigmoid ? "upsample_block (sigmoid)" : "upsample_block (leaky)",
                    [&](Tape& t) { return upsample_block(t, x, skip, k, b, act); },
                    {{"x", x}, {"skip", skip}, {"kernel", k}, {"bias", b}}, s + 23);
      }
    }
    {
      auto x = random_tensor({3, 2, 2, 2}, s + 24);
      auto w = random_tensor({4, 8}, s + 25);
      auto b = random_tensor({4}, s + 26);
      check_layer("flatten + linear", [&](Tape& t) { return linear(t, flatten(t, x), w, b); },
                  {{"x", x}, {"weight", w}, {"bias", b}}, s + 27);
    }
    {
      auto z = random_tensor({4, 3}, s + 28, -2.0, 2.0);
      const std::vector<int> labels{0, 2, 1, 2};
      check_layer("softmax", [&](Tape& t) { return softmax(t, z); }, {{"logits", z}}, s + 29);
      auto r = grad_check([&](Tape& t) { return softmax_cross_entropy(t, z, labels); }, {{"logits", z}}, opt);
      worst["cross-entropy"] = std::max(worst["cross-entropy"], r.max_rel_error);
      auto rec = random_tensor({2, 3, 4, 4}, s + 30, 0.0, 1.0);
      auto target = random_tensor({2, 3, 4, 4}, s + 31, 0.0, 1.0);
      r = grad_check([&](Tape& t) { return mse_loss(t, rec, target); }, {{"reconstruction", rec}}, opt);
      worst["mse"] = std::max(worst["mse"], r.max_rel_error);
    }
  }
  opt.seed = 7;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    worst[name] = std::max(worst[name], r.max_rel_error);
  };

  // full models at 3x32x32
  const auto x = random_tensor({4, 3, 32, 32}, 31, 0.0, 1.0);
  const std::vector<int> labels{1, 2, 0, 2};
  GradCheckOptions net_opt = opt;
  net_opt.max_coords_per_tensor = 8;
  {
    Rng rng(32);
    VggStyleConfig c = VggStyleConfig::desk();
    c.input_size = 32;
    auto net = build_single_task_cnn(c, rng);
    record("SingleTaskCnn (desk)", check_network_gradients(net, x, labels, net_opt));
    c.convs_per_block = {2, 2, 2};
    c.residual = true;
    Rng rng2(33);
    auto res = build_single_task_cnn(c, rng2);
    record("SingleTaskCnn (residual)", check_network_gradients(res, x, labels, net_opt));
  }
  {
    Rng rng(34);
    ConvAeClfConfig c = ConvAeClfConfig::desk();
    c.encoder.input_size = 32;
    auto net = build_convae_clf(c, rng);
    record("ConvAeClf (desk, alpha 0.05)", check_network_gradients(net, x, labels, net_opt));
  }
  double max_err = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : worst) std::cerr << "  gradcheck " << name << ": " << fmt("%.2e", e) << "\n";
  for (const auto& [name, e] : worst)
    if (e >= max_err) {
      max_err = e;
      worst_name = name;
    }
  const double secs = seconds_since(t0);
  return {max_err < 1e-3 && secs < 120.0, std::to_string(worst.size()) + " checks, max rel error " +
                                              fmt("%.2e", max_err) + " (" + worst_name + "), " + fmt("%.0f", secs) +
                                              " s; need < 1e-3 and < 120 s"};
}

// ---- 2: learnability --------------------------------------------------------------------

Outcome learnability(Context& ctx) {
  const auto& s = ctx.plain_cnn();
  return {s.best_val_acc >= 0.90 && ctx.plain_cnn_seconds() < 600.0,
          "best val acc " + fmt("%.3f", s.best_val_acc) + " at epoch " + std::to_string(s.best_epoch) + " of " +
              std::to_string(s.epochs_run) + ", " + fmt("%.0f", ctx.plain_cnn_seconds()) +
              " s; need >= 0.90 within 60 epochs and < 600 s"};
}

// ---- 3: background removal --------------------------------------------------------------

Outcome background_removal(Context& ctx) {
  std::array<double, 3> plain{}, cropped{}, gain{};
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto i = static_cast<std::size_t>(seed - 1);
    const auto data = ctx.dataset("cluttered_" + std::to_string(seed), "cluttered", seed, "300,60,60", 64);
    const auto crop_dir = ctx.work() / ("cluttered_" + std::to_string(seed) + "_bbox");
    cmd_segment(config("segment", {{"in", data.string()}, {"out", crop_dir.string()}, {"method", "mask"},
                                   {"mode", "bbox"}}),
                ctx.log());
    auto train = [&](const fs::path& d, const std::string& tag) {
      return cmd_train(config("train", {{"data", d.string()},
                                        {"out", (ctx.work() / ("c3_" + tag + std::to_string(seed))).string()},
                                        {"seed", std::to_string(seed)},
                                        {"image_size", "64"}}),
                       ctx.log())
          .test_acc;
    };
    plain[i] = train(data, "uncropped_");
    cropped[i] = train(crop_dir, "bbox_");
    gain[i] = cropped[i] - plain[i];
    per_seed += (seed > 1 ? ", " : "") + fmt("%.3f", cropped[i]) + " vs " + fmt("%.3f", plain[i]);
  }
  const double g = median3(gain);
  return {g >= 0.02, "median gain " + fmt("%+.1f", 100 * g) + " points (bbox vs uncropped test acc: " + per_seed +
                         "); need >= +2"};
}

// ---- 4: hybrid loss -----------------------------------------------------------------------

Outcome hybrid_loss_sanity(Context& ctx) {
  // same 64x64 plain split and seed as the single-task run of criterion 2
  const auto& cnn = ctx.plain_cnn();
  const auto s = cmd_train(config("train", {{"data", ctx.plain().string()},
                                            {"out", (ctx.work() / "c4_convae").string()},
                                            {"seed", "1"},
                                            {"model", "convae"},
                                            {"alpha", "0.05"},
                                            {"image_size", "64"}}),
                           ctx.log());
  const double gap = s.best_val_acc - cnn.best_val_acc;
  return {std::abs(gap) <= 0.05 && s.final_recon_loss < 0.02,
          "ConvAeClf val acc " + fmt("%.3f", s.best_val_acc) + " (epoch " + std::to_string(s.best_epoch) + " of " +
              std::to_string(s.epochs_run) + ") vs CNN " + fmt("%.3f", cnn.best_val_acc) + " (" +
              fmt("%+.1f", 100 * gap) + " points), val recon MSE " + fmt("%.4f", s.final_recon_loss) +
              "; need within 5 points and MSE < 0.02"};
}

// ---- 5: schedules and early stopping ---------------------------------------------------------

Outcome schedules(Context&) {
  int checked = 0, failed = 0;
  auto expect = [&](bool ok) {
    ++checked;
    failed += ok ? 0 : 1;
  };
  for (double lr0 : {1e-3, 1e-2, 0.5}) {
    for (int e = 0; e < 100; ++e) {
      const double want = lr0 * std::pow(0.1, e / 15);
      expect(std::abs(step_decay(lr0, e) - want) <= 1e-12 * want);
    }
  }

  // Scripted accuracy traces. An improving epoch resets the stall run; a run
  // of L stalls has cut the rate floor(L / 8) times.
  Rng rng(99);
  for (int trace = 0; trace < 30; ++trace) {
    std::vector<bool> improves(100);
    const double p = trace == 0 ? 1.0 : trace == 1 ? 0.0 : uniform(rng, 0.02, 0.4);
    for (auto&& v : improves) v = uniform(rng, 0.0, 1.0) < p;
    improves[0] = true;  // baseline
    ReduceOnPlateau plateau;
    plateau.lr = 1e-4;
    double acc = 0.1;
    int cuts_done = 0, run = 0;
    for (int e = 0; e < 100; ++e) {
      if (e > 0 && improves[static_cast<std::size_t>(e)]) acc += 0.001;
      const double got = plateau.update(e > 0 && !improves[static_cast<std::size_t>(e)] ? acc - 0.0005 * (e % 3) : acc);
      if (e == 0 || improves[static_cast<std::size_t>(e)]) {
        cuts_done += run / 8;
        run = 0;
      } else {
        ++run;
      }
      const double want = 1e-4 * std::pow(0.2, cuts_done + run / 8);
      expect(std::abs(got - want) <= 1e-12 * want);
    }
  }

  // Early stopping: best reached at call b, flat afterwards, stops on call b + 20.
  for (int b : {0, 1, 5, 17, 40}) {
    EarlyStopping es;
    int stopped_at = -1;
    for (int call = 0; call < 200 && stopped_at < 0; ++call) {
      const double acc = call <= b ? 0.1 + 0.01 * call : 0.1 + 0.01 * b - 0.001 * (call % 2);
      if (es.update(acc)) stopped_at = call;
    }
    expect(stopped_at == b + 20);
  }
  return {failed == 0, std::to_string(checked - failed) + "/" + std::to_string(checked) +
                           " scripted values match the closed forms"};
}

// ---- 6: explainability -----------------------------------------------------------------------

double class_probability(Network& net, const Tensor& image, int cls) {
  Tape quiet(false);
  const auto out = net.forward(quiet, image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}), false);
  return softmax(quiet, out.logits).at(cls);
}

double saliency_error(std::uint64_t seed) {
  VggStyleConfig cfg;
  cfg.block_channels = {4};
  cfg.convs_per_block = {1};
  cfg.fc_dims = {3};
  cfg.input_size = 4;
  Rng rng(seed);
  auto net = build_single_task_cnn(cfg, rng);
  net.set_mode(Mode::Eval);
  const auto x = random_tensor({3, 4, 4}, seed + 100);
  const auto map = saliency_map(net, x);
  // perturb one input value at a time, on the linear piece of x
  BranchTrace rec(BranchTrace::Kind::Record);
  class_probability(net, x, map.predicted);
  rec.stop();
  const double h = 1e-2;
  double worst = 0.0;
  for (int pix = 0; pix < 16; ++pix) {
    double sq = 0.0;
    for (int c = 0; c < 3; ++c) {
      auto f = [&](double delta) {
        Tensor y = x.clone();
        y.at(c * 16 + pix) += static_cast<float>(delta);
        BranchTrace replay(BranchTrace::Kind::Replay, &rec);
        return class_probability(net, y, map.predicted);
      };
      const double d = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
      sq += d * d;
    }
    const double fd = std::sqrt(sq), an = map.values[static_cast<std::size_t>(pix)];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  return worst;
}

Outcome explainability(Context& ctx) {
  double sal = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) sal = std::max(sal, saliency_error(seed));

  const auto& trained = ctx.plain_cnn();
  const auto data = ctx.plain();

  // multiply-back on the trained model's latent vectors, covariance built independently
  auto model = load_model(trained.checkpoint);
  const auto samples = load_samples(load_manifest(data / "test", "test"), model.net.encoder_config().input_size);
  const auto features = extract_latent(model.net, make_batch(samples, model.scaling));
  const int k = 5;
  const auto pca = pca_fit(features, k);
  const auto n = features.rows, d = features.cols;
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += features(i, j) / static_cast<double>(n);
  std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t a = 0; a < d; ++a) {
      const double xa = features(i, a) - mean[static_cast<std::size_t>(a)];
      if (xa == 0.0) continue;
      for (std::int64_t b = 0; b < d; ++b)
        cov[static_cast<std::size_t>(a * d + b)] += xa * (features(i, b) - mean[static_cast<std::size_t>(b)]);
    }
  for (auto& v : cov) v /= static_cast<double>(n - 1);
  double mb = 0.0;
  for (int c = 0; c < k; ++c) {
    const double lambda = pca.explained_variance[static_cast<std::size_t>(c)];
    for (std::int64_t a = 0; a < d; ++a) {
      double cv = 0.0;
      for (std::int64_t b = 0; b < d; ++b) cv += cov[static_cast<std::size_t>(a * d + b)] * pca.components(c, b);
      mb = std::max(mb, std::abs(cv - lambda * pca.components(c, a)) / pca.explained_variance[0]);
    }
  }

  const auto pc = cmd_explain(config("explain", {{"checkpoint", trained.checkpoint.string()},
                                                 {"data", data.string()},
                                                 {"split", "test"},
                                                 {"mode", "pca"},
                                                 {"out", (ctx.work() / "c6_pca").string()}}),
                              ctx.log());
  const auto& m = pc.mean_pc1;
  const bool ordered = m[2] > m[1] && m[1] > m[0];

  const auto ev = cmd_eval(config("eval", {{"checkpoint", trained.checkpoint.string()},
                                           {"data", data.string()},
                                           {"split", "test"},
                                           {"out", (ctx.work() / "c6_eval").string()}}),
                           ctx.log());
  const auto counts = load_manifest(data / "test", "test").grade_counts();
  bool rows_ok = true;
  for (int g = 0; g < 3; ++g) rows_ok = rows_ok && ev.confusion.row_sum(g) == counts[static_cast<std::size_t>(g)];

  return {sal < 1e-3 && mb < 1e-5 && ordered && rows_ok,
          "saliency rel error " + fmt("%.1e", sal) + ", multiply-back " + fmt("%.1e", mb) + ", mean PC1 A/B/C " +
              fmt("%.2f", m[0]) + "/" + fmt("%.2f", m[1]) + "/" + fmt("%.2f", m[2]) +
              (ordered ? " (C>B>A)" : " (not C>B>A)") + ", confusion rows " + (rows_ok ? "match" : "differ") +
              " grade counts"};
}

// ---- 7: determinism ---------------------------------------------------------------------------

Outcome determinism(Context& ctx) {
  const auto data = ctx.dataset("small", "plain", 5, "60,20,20", 32);
  std::string detail;
  bool ok = true;
  for (const std::string model : {"cnn", "convae"}) {
    std::array<fs::path, 2> outs{ctx.work() / ("c7_" + model + "_a"), ctx.work() / ("c7_" + model + "_b")};
    for (const auto& out : outs) {
      fs::remove_all(out);
      std::ostringstream o, e;
      const std::vector<std::string> args{"train",        "--data",      data.string(), "--out", out.string(),
                                          "--seed",       "42",          "--model",     model,   "--image-size",
                                          "32",           "--max-epochs", "4"};
      if (run_cli(args, o, e) != 0) return {false, model + " run failed: " + e.str()};
    }
    const bool same_hist = slurp(outs[0] / "history.csv") == slurp(outs[1] / "history.csv");
    const bool same_ck = slurp(outs[0] / "model.mgck") == slurp(outs[1] / "model.mgck");
    ok = ok && same_hist && same_ck;
    detail += (detail.empty() ? "" : ", ") + model + ": history " + (same_hist ? "identical" : "differs") +
              ", checkpoint " + (same_ck ? "identical" : "differs");
  }
  return {ok, detail};
}

// ---- 8: segmentation -----------------------------------------------------------------------------

Outcome segmentation(Context&) {
  int fixtures = 0, matched = 0;
  for (int size : {24, 32, 48})
    for (int edge : {size / 3, size / 2, 2 * size / 3}) {
      ++fixtures;
      const auto img = testing::step_image(size, edge);
      matched += testing::edges_match(canny_segment(img), testing::opencv_canny(img, {})) ? 1 : 0;
    }
  for (auto [size, lo, hi] : {std::tuple{32, 8, 23}, std::tuple{48, 14, 33}, std::tuple{64, 10, 50}}) {
    ++fixtures;
    const auto img = testing::square_image(size, lo, hi);
    matched += testing::edges_match(canny_segment(img), testing::opencv_canny(img, {})) ? 1 : 0;
  }

  Rng rng(2024);
  int boxes_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const int w = 1 + static_cast<int>(uniform_index(rng, 64)), h = 1 + static_cast<int>(uniform_index(rng, 64));
    const double density = uniform(rng, 0.001, 0.3);
    BinaryMask mask(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) mask.set(x, y, uniform(rng, 0.0, 1.0) < density);
    if (mask.count() == 0) mask.set(static_cast<int>(uniform_index(rng, w)), static_cast<int>(uniform_index(rng, h)), true);
    BBox want{w, h, -1, -1};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (mask.at(x, y)) {
          want.x_min = std::min(want.x_min, x);
          want.y_min = std::min(want.y_min, y);
          want.x_max = std::max(want.x_max, x);
          want.y_max = std::max(want.y_max, y);
        }
    boxes_ok += mask_to_bbox(mask) == want ? 1 : 0;
  }
  return {matched == fixtures && boxes_ok == 100, "Canny matches the reference on " + std::to_string(matched) + "/" +
                                                      std::to_string(fixtures) + " fixtures; bbox equals the scan on " +
                                                      std::to_string(boxes_ok) + "/100 masks"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "mg_acceptance";
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      try {
        selected.push_back(std::stoi(a));
      } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--work DIR] [criterion numbers...]\n";
        return 2;
      }
    }
  }
  const std::map<int, std::pair<const char*, std::function<Outcome(Context&)>>> criteria{
      {1, {"gradient correctness", gradient_correctness}},
      {2, {"synthetic learnability", learnability}},
      {3, {"background removal direction of effect", background_removal}},
      {4, {"hybrid loss sanity", hybrid_loss_sanity}},
      {5, {"scheduler and early stopping closed forms", schedules}},
      {6, {"explainability oracles", explainability}},
      {7, {"determinism", determinism}},
      {8, {"segmentation properties", segmentation}},
  };
  if (selected.empty())
    for (const auto& [id, c] : criteria) selected.push_back(id);

  Context ctx(work);
  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it->second.second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << it->second.first << ": "
              << o.detail << " [" << fmt("%.0f", seconds_since(t0)) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
