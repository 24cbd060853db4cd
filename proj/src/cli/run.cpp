#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <ostream>

#include "mg/checkpoint.hpp"
#include "mg/cli.hpp"
#include "mg/image.hpp"

namespace mg {

namespace {

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

const std::map<std::string, std::string> kDescriptions{
    {"synth", "generate a deterministic synthetic mango dataset"},
    {"segment", "remove backgrounds by bounding-box crop or splash"},
    {"train", "train a single-task CNN or a ConvAE classifier"},
    {"eval", "confusion matrix and accuracy of a checkpoint"},
    {"explain", "saliency maps, PCA of latent features, or misclassification ranking"},
    {"gradcheck", "finite-difference check of both model families"},
};

bool is_bool_key(const ConfigKey& k) { return k.default_value == "true" || k.default_value == "false"; }

void print_summary(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& log,
                   int& code) {
  if (command == "synth") {
    const auto r = cmd_synth(cfg, log);
    out << "wrote " << r.size() << " images to " << cfg.get("out") << "\n";
  } else if (command == "segment") {
    const auto s = cmd_segment(cfg, log);
    out << "segmented " << s.processed << " images, skipped " << s.skipped << "\n";
  } else if (command == "train") {
    const auto s = cmd_train(cfg, log);
    out << "checkpoint " << s.checkpoint.string() << "\nhistory " << s.history.string() << "\nbest_val_acc "
        << s.best_val_acc << "\n";
    if (s.test_acc >= 0.0) out << "test_acc " << s.test_acc << "\n";
  } else if (command == "eval") {
    const auto s = cmd_eval(cfg, log);
    const auto& cm = s.confusion;
    const auto trace = cm.counts[0][0] + cm.counts[1][1] + cm.counts[2][2];
    out << "accuracy " << s.accuracy << " (" << trace << "/" << cm.total() << ")\nconfusion "
        << s.confusion_csv.string() << "\n";
  } else if (command == "explain") {
    const auto s = cmd_explain(cfg, log);
    out << "wrote " << s.files_written << " files to " << s.out_dir.string() << "\n";
  } else {
    const auto s = cmd_gradcheck(cfg, log);
    out << "max_rel_error " << s.max_rel_error << " " << (s.passed ? "PASS" : "FAIL") << "\n";
    if (!s.passed) code = kExitNumerical;
  }
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mango grading pipeline: synthetic data, segmentation, training and explanation"};
  app.name("mango");
  app.require_subcommand(1, 1);

  struct Sub {
    CLI::App* app = nullptr;
    RunConfig config;
    std::string config_file;
    std::map<std::string, CLI::Option*> options;
    std::map<std::string, std::string> values;
  };
  std::map<std::string, Sub> subs;
  for (const auto& name : command_names()) {
    auto& s = subs[name];
    s.config = make_config(name);
    s.app = app.add_subcommand(name, kDescriptions.at(name));
    s.app->add_option("--config", s.config_file, "key = value file; flags override its values");
    for (const auto& k : s.config.schema()) {
      std::string help = k.help;
      if (!k.default_value.empty()) help += " [" + k.default_value + "]";
      if (k.required) help += " (required)";
      auto* opt = s.app->add_option(flag_name(k.name), s.values[k.name], help);
      if (is_bool_key(k)) opt->expected(0, 1);
      s.options[k.name] = opt;
    }
  }

  std::vector<std::string> argv_store{"mango"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    // prints help (exit 0) or the parse error with a usage hint
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  const auto* chosen = app.get_subcommands().front();
  auto& s = subs.at(chosen->get_name());
  try {
    if (!s.config_file.empty()) s.config.merge_file(s.config_file);
    for (const auto& [key, opt] : s.options) {
      if (opt->count() == 0) continue;
      const auto& r = opt->results();
      s.config.set(key, r.empty() || r.front().empty() ? "true" : r.front());
    }
    int code = kExitOk;
    print_summary(chosen->get_name(), s.config, out, err, code);
    return code;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ImageIoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DataError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace mg
