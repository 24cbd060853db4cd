#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mg/network.hpp"
#include "mg/preprocess.hpp"
#include "mg/sample.hpp"

namespace mg {

// ---- optimizers ------------------------------------------------------------------

struct OptimizerConfig {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerConfig sgd(double lr, double momentum = 0.9) { return {Kind::Sgd, lr, momentum}; }
  static OptimizerConfig adam(double lr) { return {Kind::Adam, lr}; }
};

/// Per-parameter slots, in parameter order: momentum (SGD) or first/second moments (Adam).
struct OptimizerSlots {
  std::int64_t step = 0;
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
};

/// v <- momentum * v + g;  theta <- theta - lr * v
void sgd_step(std::span<const NamedTensor> params, OptimizerSlots& slots, double lr, double momentum = 0.9);
/// Bias-corrected Adam.
void adam_step(std::span<const NamedTensor> params, OptimizerSlots& slots, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);
void optimizer_step(const OptimizerConfig& cfg, std::span<const NamedTensor> params, OptimizerSlots& slots, double lr);

// ---- schedules / early stopping ----------------------------------------------------

/// lr0 * factor^floor(epoch / every)
double step_decay(double lr0, int epoch, int every = 15, double factor = 0.1);

/// Multiplies the rate by `factor` after `patience` consecutive calls without
/// a strictly better accuracy. The first call only sets the baseline.
struct ReduceOnPlateau {
  double lr = 1e-4;
  int patience = 8;
  double factor = 0.2;
  double best = -1.0;
  int stalls = 0;

  double update(double val_accuracy);
};

/// Stops after `patience` consecutive calls without a strictly better
/// accuracy; the first call is the baseline, so a flat trace stops on call
/// patience + 1.
struct EarlyStopping {
  int patience = 20;
  double best = -1.0;
  int best_call = -1;
  int stalls = 0;
  int calls = 0;

  /// True when training should stop.
  bool update(double val_accuracy);
};

// ---- the epoch loop ----------------------------------------------------------------

struct ScheduleConfig {
  enum class Kind { None, StepDecay, ReduceOnPlateau };
  Kind kind = Kind::None;
  int step_every = 15;
  double step_factor = 0.1;
  int plateau_patience = 8;
  double plateau_factor = 0.2;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  int batch_size = 32;
  int max_epochs = 60;
  int early_stop_patience = 20;
  bool augment = true;
  AugmentPolicy augment_policy;
  ScalingScheme scaling;
  /// Hybrid-loss weight for ConvAeClf; the network's own alpha when unset.
  std::optional<float> alpha;
  std::uint64_t seed = 0;
  bool verbose = false;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double recon_loss = 0.0;  // ConvAeClf only
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  int next_epoch = 0;
  double lr = 0.0;
  OptimizerSlots slots;
  ReduceOnPlateau plateau;
  EarlyStopping early;
  double best_val_acc = -1.0;
  int best_epoch = -1;
  StateDict best_state;
  StateDict model_state;
  std::vector<EpochRecord> history;
  bool finished = false;
};

void write_train_state(std::ostream& out, const TrainState& state);
TrainState read_train_state(std::istream& in);
void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path);

/// Runs the loop one epoch at a time. Per-epoch shuffles, per-sample
/// augmentation and per-batch dropout all draw from streams derived from
/// (seed, epoch, index), so the state above is the only thing to carry over.
class Trainer {
 public:
  Trainer(Network& net, const SampleSet& train, const SampleSet& val, TrainConfig cfg);

  /// Runs one epoch; false once training has finished (max epochs or early stop).
  bool run_epoch();
  /// Runs to completion and loads the best-validation parameters into the network.
  void run();

  const TrainState& state() const { return state_; }
  /// Snapshot including the current model parameters.
  TrainState snapshot() const;
  /// Restores a snapshot (parameters included).
  void restore(const TrainState& state);
  bool finished() const { return state_.finished; }

 private:
  Network& net_;
  const SampleSet& train_;
  const SampleSet& val_;
  TrainConfig cfg_;
  TrainState state_;
};

struct TrainResult {
  StateDict best_state;
  int best_epoch = -1;
  double best_val_acc = 0.0;
  std::vector<EpochRecord> history;
  bool early_stopped = false;
};

/// Full run; the network ends holding its best-validation parameters.
TrainResult train_loop(Network& net, const SampleSet& train, const SampleSet& val, const TrainConfig& cfg);

// ---- evaluation ----------------------------------------------------------------------

/// Stacks images into [N,C,H,W] after feature scaling.
Tensor make_batch(std::span<const Sample> samples, const ScalingScheme& scaling);

struct EvalResult {
  std::vector<int> predictions;
  std::vector<float> losses;  // per-sample cross-entropy
  std::vector<std::vector<float>> probabilities;
  double accuracy = 0.0;
};

/// Eval-mode pass without augmentation; the network's mode is restored afterwards.
EvalResult evaluate(Network& net, const SampleSet& samples, const ScalingScheme& scaling, int batch_size = 32);

/// `epoch,train_loss,train_acc,val_acc,lr` (+ `,recon_loss`), 6-decimal fixed point.
void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history, bool with_recon);

}  // namespace mg
