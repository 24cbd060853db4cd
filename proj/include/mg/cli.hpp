#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mg/data_io.hpp"
#include "mg/explain.hpp"
#include "mg/gradcheck.hpp"
#include "mg/network.hpp"
#include "mg/training.hpp"

namespace mg {

/// Bad flags, unknown config keys, malformed values. Exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitIo = 2, kExitNumerical = 3 };

// ---- run configuration ----------------------------------------------------------------

struct ConfigKey {
  std::string name;           // underscore form; the flag is --name with '-' for '_'
  std::string default_value;  // empty = unset
  std::string help;
  bool required = false;
};

/// Flat key=value configuration for one command. Resolution order is
/// defaults, then the config file, then explicit flags.
class RunConfig {
 public:
  RunConfig() = default;
  RunConfig(std::string command, std::vector<ConfigKey> schema);

  const std::string& command() const { return command_; }
  const std::vector<ConfigKey>& schema() const { return schema_; }

  /// Unknown keys throw UsageError. '-' in a key is read as '_'.
  void set(std::string key, std::string value);
  /// `key = value` lines; blank lines and lines starting with '#' are ignored.
  void merge_text(std::string_view text, const std::string& origin = "config");
  void merge_file(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  /// Throws UsageError naming the first required key that is still unset.
  void check_required() const;

  /// `command = ...` followed by every key in schema order; unset keys are
  /// written with an empty value. Parsing it back gives the same config.
  std::string serialize() const;

 private:
  std::string command_;
  std::vector<ConfigKey> schema_;
  std::map<std::string, std::string> values_;
};

/// Commands: synth, segment, train, eval, explain, gradcheck.
const std::vector<std::string>& command_names();
/// Throws UsageError for an unknown command.
RunConfig make_config(const std::string& command);

/// Writes `dir/run_config.txt`.
void log_run_config(const std::filesystem::path& dir, const RunConfig& config);

// ---- model files ------------------------------------------------------------------------

/// Network checkpoint plus the feature scaling it was trained with.
struct TrainedModel {
  Network net;
  ScalingScheme scaling;
};

void save_model(const std::filesystem::path& path, const Network& net, const ScalingScheme& scaling);
/// Throws CheckpointError for missing or inconsistent files. The network is in eval mode.
TrainedModel load_model(const std::filesystem::path& path);

// ---- commands ------------------------------------------------------------------------------
// Each takes a resolved config, writes its artifacts and returns a summary.
// Progress and warnings go to `log`.

/// Per-split counts come from `counts` when set, otherwise `n` split by `fractions`.
std::vector<SynthRecord> cmd_synth(const RunConfig& config, std::ostream& log);

struct SegmentSummary {
  int processed = 0;
  int skipped = 0;  // empty mask or edge set
};
/// Writes out/<split>/ images (+ cropped masks, labels.csv) and out/segment_report.csv.
SegmentSummary cmd_segment(const RunConfig& config, std::ostream& log);

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path history;
  int best_epoch = -1;
  double best_val_acc = 0.0;
  int epochs_run = 0;
  bool early_stopped = false;
  double final_recon_loss = 0.0;  // ConvAeClf: reconstruction MSE of the best epoch
  double test_acc = -1.0;         // -1 when the dataset has no test split
};
/// Writes out/model.mgck, out/history.csv and out/run_config.txt.
TrainSummary cmd_train(const RunConfig& config, std::ostream& log);

struct EvalSummary {
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  std::filesystem::path confusion_csv;
};
EvalSummary cmd_eval(const RunConfig& config, std::ostream& log);

struct ExplainSummary {
  std::filesystem::path out_dir;
  int files_written = 0;
  std::array<double, 3> mean_pc1{};  // pca mode, per grade (NaN when a grade is absent)
  std::vector<Misclassified> ranked;  // rank mode
};
ExplainSummary cmd_explain(const RunConfig& config, std::ostream& log);

struct GradCheckSummary {
  double max_rel_error = 0.0;
  double tolerance = 1e-3;
  bool passed = false;
  std::vector<std::pair<std::string, GradCheckReport>> models;
};
GradCheckSummary cmd_gradcheck(const RunConfig& config, std::ostream& log);

/// argv-style entry point (args[0] is the command name, not the program).
/// Never throws; returns an ExitCode.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace mg
