#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include "mg/checkpoint.hpp"
#include "mg/training.hpp"

namespace mg {

static_assert(std::endian::native == std::endian::little, "train-state files are written in host order");

void TrainConfig::validate() const {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (max_epochs < 1) throw ParameterError("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw ParameterError("early_stop_patience must be >= 1");
  if (!(optimizer.lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
  if (alpha && (*alpha < 0.0f || *alpha > 1.0f)) throw ParameterError("alpha must lie in [0,1]");
  if (schedule.step_every < 1 || schedule.plateau_patience < 1) throw ParameterError("schedule periods must be >= 1");
}

// ---- batches / evaluation -----------------------------------------------------------

namespace {

Tensor stack(const std::vector<Tensor>& images) {
  const Shape& s = images.front().shape();
  Shape shape{static_cast<std::int64_t>(images.size())};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  auto o = out.data();
  const auto per = static_cast<std::size_t>(images.front().numel());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) {
      throw DimensionError("batch images differ in shape: " + shape_str(images[i].shape()) + " vs " + shape_str(s));
    }
    std::copy_n(images[i].data().begin(), per, o.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

std::vector<float> row_softmax(std::span<const float> logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<float> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) z += std::exp(static_cast<double>(logits[k] - mx));
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<float>(std::exp(static_cast<double>(logits[k] - mx)) / z);
  return p;
}

int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

Tensor make_batch(std::span<const Sample> samples, const ScalingScheme& scaling) {
  if (samples.empty()) throw ParameterError("make_batch: no samples");
  std::vector<Tensor> scaled;
  scaled.reserve(samples.size());
  for (const auto& s : samples) scaled.push_back(scale_unit_image(s.image, scaling));
  return stack(scaled);
}

EvalResult evaluate(Network& net, const SampleSet& samples, const ScalingScheme& scaling, int batch_size) {
  if (batch_size < 1) throw ParameterError("evaluate: batch_size must be >= 1");
  EvalResult r;
  const Mode saved = net.mode();
  net.set_mode(Mode::Eval);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(samples.size() - start, static_cast<std::size_t>(batch_size));
    const std::span<const Sample> chunk(samples.data() + start, n);
    Tape quiet(false);
    const auto out = net.forward(quiet, make_batch(chunk, scaling), false);
    std::vector<int> labels;
    for (const auto& s : chunk) labels.push_back(s.label);
    const auto ce = cross_entropy_per_sample(out.logits, labels);
    const auto k = static_cast<std::size_t>(out.logits.dim(1));
    for (std::size_t i = 0; i < n; ++i) {
      const std::span<const float> row(out.logits.data().data() + i * k, k);
      const int pred = argmax(row);
      r.predictions.push_back(pred);
      r.probabilities.push_back(row_softmax(row));
      r.losses.push_back(ce[i]);
      correct += pred == labels[i] ? 1 : 0;
    }
  }
  net.set_mode(saved);
  r.accuracy = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
  return r;
}

// ---- trainer --------------------------------------------------------------------------

Trainer::Trainer(Network& net, const SampleSet& train, const SampleSet& val, TrainConfig cfg)
    : net_(net), train_(train), val_(val), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (train_.empty() || val_.empty()) throw ParameterError("train_loop: training and validation sets must be non-empty");
  state_.lr = cfg_.optimizer.lr;
  state_.plateau = {cfg_.optimizer.lr, cfg_.schedule.plateau_patience, cfg_.schedule.plateau_factor};
  state_.early.patience = cfg_.early_stop_patience;
}

bool Trainer::run_epoch() {
  if (state_.finished) return false;
  const int epoch = state_.next_epoch;
  switch (cfg_.schedule.kind) {
    case ScheduleConfig::Kind::StepDecay:
      state_.lr = step_decay(cfg_.optimizer.lr, epoch, cfg_.schedule.step_every, cfg_.schedule.step_factor);
      break;
    case ScheduleConfig::Kind::ReduceOnPlateau:
      state_.lr = state_.plateau.lr;
      break;
    case ScheduleConfig::Kind::None:
      state_.lr = cfg_.optimizer.lr;
      break;
  }
  const bool hybrid = net_.kind() == ModelKind::ConvAeClf;
  const float alpha = cfg_.alpha.value_or(net_.convae_config().alpha);
  const auto e = static_cast<std::uint64_t>(epoch);

  net_.set_mode(Mode::Train);
  const auto order = shuffled(train_.size(), derive_seed(cfg_.seed, {1, e}));
  double loss_sum = 0.0, recon_sum = 0.0;
  std::size_t correct = 0;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0, b = 0; start < order.size(); start += bs, ++b) {
    const auto n = std::min(bs, order.size() - start);
    std::vector<Tensor> unit, scaled;
    std::vector<int> labels;
    for (std::size_t i = start; i < start + n; ++i) {
      const auto idx = order[i];
      Tensor img = train_[idx].image;
      if (cfg_.augment) {
        Rng rng(derive_seed(cfg_.seed, {2, e, static_cast<std::uint64_t>(idx)}));
        img = augment(img, cfg_.augment_policy, rng);
      }
      scaled.push_back(scale_unit_image(img, cfg_.scaling));
      unit.push_back(img);
      labels.push_back(train_[idx].label);
    }
    net_.seed_dropout(derive_seed(cfg_.seed, {3, e, static_cast<std::uint64_t>(b)}));
    net_.zero_grad();
    Tape tape;
    const auto out = net_.forward(tape, stack(scaled));
    Tensor loss;
    HybridLossTerms terms;
    if (hybrid) {
      loss = hybrid_loss(tape, out.logits, labels, out.reconstruction, stack(unit), alpha, &terms);
    } else {
      loss = softmax_cross_entropy(tape, out.logits, labels);
    }
    if (!loss.all_finite()) {
      throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + " (lr " + std::to_string(state_.lr) + ")");
    }
    tape.backward(loss);
    optimizer_step(cfg_.optimizer, net_.parameters(), state_.slots, state_.lr);

    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    if (hybrid) recon_sum += static_cast<double>(terms.reconstruction.item()) * static_cast<double>(n);
    const auto k = static_cast<std::size_t>(out.logits.dim(1));
    for (std::size_t i = 0; i < n; ++i) {
      correct += argmax({out.logits.data().data() + i * k, k}) == labels[i] ? 1 : 0;
    }
  }

  EpochRecord rec;
  rec.epoch = epoch;
  const auto total = static_cast<double>(train_.size());
  rec.train_loss = loss_sum / total;
  rec.train_acc = static_cast<double>(correct) / total;
  rec.recon_loss = recon_sum / total;
  rec.lr = state_.lr;
  rec.val_acc = evaluate(net_, val_, cfg_.scaling, cfg_.batch_size).accuracy;
  state_.history.push_back(rec);

  if (rec.val_acc > state_.best_val_acc) {
    state_.best_val_acc = rec.val_acc;
    state_.best_epoch = epoch;
    state_.best_state = net_.state_dict();
  }
  if (cfg_.schedule.kind == ScheduleConfig::Kind::ReduceOnPlateau) state_.plateau.update(rec.val_acc);
  const bool stop = state_.early.update(rec.val_acc);
  state_.next_epoch = epoch + 1;
  state_.finished = stop || state_.next_epoch >= cfg_.max_epochs;

  if (cfg_.verbose) {
    std::fprintf(stderr, "epoch %3d  loss %.4f  train_acc %.3f  val_acc %.3f  lr %.2e%s\n", epoch, rec.train_loss,
                 rec.train_acc, rec.val_acc, rec.lr, stop ? "  (early stop)" : "");
  }
  return true;
}

void Trainer::run() {
  while (run_epoch()) {
  }
  net_.load_state_dict(state_.best_state);
}

TrainState Trainer::snapshot() const {
  TrainState s = state_;
  s.model_state = net_.state_dict();
  return s;
}

void Trainer::restore(const TrainState& state) {
  state_ = state;
  if (!state.model_state.empty()) net_.load_state_dict(state.model_state);
  state_.model_state.clear();
}

TrainResult train_loop(Network& net, const SampleSet& train, const SampleSet& val, const TrainConfig& cfg) {
  Trainer trainer(net, train, val, cfg);
  trainer.run();
  const auto& s = trainer.state();
  TrainResult r;
  r.best_state = s.best_state;
  r.best_epoch = s.best_epoch;
  r.best_val_acc = s.best_val_acc;
  r.history = s.history;
  r.early_stopped = s.early.stalls >= s.early.patience;
  return r;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history, bool with_recon) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::fputs(with_recon ? "epoch,train_loss,train_acc,val_acc,lr,recon_loss\n" : "epoch,train_loss,train_acc,val_acc,lr\n", f);
  for (const auto& r : history) {
    std::fprintf(f, "%d,%.6f,%.6f,%.6f,%.6f", r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr);
    if (with_recon) std::fprintf(f, ",%.6f", r.recon_loss);
    std::fputc('\n', f);
  }
  const bool ok = std::fflush(f) == 0;
  std::fclose(f);
  if (!ok) throw std::runtime_error("write failed: " + path.string());
}

// ---- train-state files ------------------------------------------------------------------
// "MGTS" | u32 version | scalars | history | optimizer slots | best state | model state

namespace {

constexpr std::uint32_t kStateVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("train state: truncated file");
  return v;
}

void put_slots(std::ostream& out, const std::vector<std::vector<float>>& slots) {
  put<std::uint64_t>(out, slots.size());
  for (const auto& s : slots) {
    put<std::uint64_t>(out, s.size());
    out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(float)));
  }
}

std::vector<std::vector<float>> get_slots(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1u << 20)) throw CheckpointError("train state: implausible slot count");
  std::vector<std::vector<float>> slots(n);
  for (auto& s : slots) {
    const auto len = get<std::uint64_t>(in);
    if (len > (1ull << 32)) throw CheckpointError("train state: implausible slot size");
    s.resize(len);
    if (!in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(len * sizeof(float)))) {
      throw CheckpointError("train state: truncated slots");
    }
  }
  return slots;
}

}  // namespace

void write_train_state(std::ostream& out, const TrainState& s) {
  out.write("MGTS", 4);
  put(out, kStateVersion);
  put<std::int32_t>(out, s.next_epoch);
  put(out, s.lr);
  put<std::int64_t>(out, s.slots.step);
  put(out, s.plateau.lr);
  put<std::int32_t>(out, s.plateau.patience);
  put(out, s.plateau.factor);
  put(out, s.plateau.best);
  put<std::int32_t>(out, s.plateau.stalls);
  put<std::int32_t>(out, s.early.patience);
  put(out, s.early.best);
  put<std::int32_t>(out, s.early.best_call);
  put<std::int32_t>(out, s.early.stalls);
  put<std::int32_t>(out, s.early.calls);
  put(out, s.best_val_acc);
  put<std::int32_t>(out, s.best_epoch);
  put<std::uint8_t>(out, s.finished ? 1 : 0);
  put<std::uint64_t>(out, s.history.size());
  for (const auto& r : s.history) {
    put<std::int32_t>(out, r.epoch);
    put(out, r.train_loss);
    put(out, r.train_acc);
    put(out, r.val_acc);
    put(out, r.lr);
    put(out, r.recon_loss);
  }
  put_slots(out, s.slots.first);
  put_slots(out, s.slots.second);
  write_tensors(out, s.best_state);
  write_tensors(out, s.model_state);
  if (!out) throw CheckpointError("train state: write failed");
}

TrainState read_train_state(std::istream& in) {
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, "MGTS", 4) != 0) throw CheckpointError("train state: bad magic");
  if (get<std::uint32_t>(in) != kStateVersion) throw CheckpointError("train state: unsupported version");
  TrainState s;
  s.next_epoch = get<std::int32_t>(in);
  s.lr = get<double>(in);
  s.slots.step = get<std::int64_t>(in);
  s.plateau.lr = get<double>(in);
  s.plateau.patience = get<std::int32_t>(in);
  s.plateau.factor = get<double>(in);
  s.plateau.best = get<double>(in);
  s.plateau.stalls = get<std::int32_t>(in);
  s.early.patience = get<std::int32_t>(in);
  s.early.best = get<double>(in);
  s.early.best_call = get<std::int32_t>(in);
  s.early.stalls = get<std::int32_t>(in);
  s.early.calls = get<std::int32_t>(in);
  s.best_val_acc = get<double>(in);
  s.best_epoch = get<std::int32_t>(in);
  s.finished = get<std::uint8_t>(in) != 0;
  const auto n = get<std::uint64_t>(in);
  if (n > (1u << 24)) throw CheckpointError("train state: implausible history length");
  for (std::uint64_t i = 0; i < n; ++i) {
    EpochRecord r;
    r.epoch = get<std::int32_t>(in);
    r.train_loss = get<double>(in);
    r.train_acc = get<double>(in);
    r.val_acc = get<double>(in);
    r.lr = get<double>(in);
    r.recon_loss = get<double>(in);
    s.history.push_back(r);
  }
  s.slots.first = get_slots(in);
  s.slots.second = get_slots(in);
  s.best_state = read_tensors(in);
  s.model_state = read_tensors(in);
  return s;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_train_state(out, state);
}

TrainState load_train_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_train_state(in);
}

}  // namespace mg
