#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "mg/cli.hpp"

namespace mg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string canonical_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw UsageError("config: " + key + " = '" + text + "' is not a valid number");
  }
  return v;
}

const std::map<std::string, std::vector<ConfigKey>>& schemas() {
  static const std::map<std::string, std::vector<ConfigKey>> table = {
      {"synth",
       {
           {"out", "", "output dataset root", true},
           {"seed", "", "generator seed", true},
           {"n", "300", "total image count, split by fractions"},
           {"counts", "", "exact train,val,test counts (overrides n)"},
           {"fractions", "0.8,0.1,0.1", "train,val,test shares of n"},
           {"size", "64", "image side in pixels"},
           {"background", "plain", "plain | cluttered"},
           {"grade_mix", "0.32,0.37,0.31", "A,B,C shares"},
           {"label_noise", "0", "probability of a flipped label"},
       }},
      {"segment",
       {
           {"in", "", "dataset root or a directory with labels.csv", true},
           {"out", "", "output root", true},
           {"method", "mask", "mask | canny"},
           {"mode", "bbox", "bbox | splash"},
           {"low", "0.1", "canny hysteresis low threshold"},
           {"high", "0.3", "canny high threshold"},
           {"sigma", "1.4", "canny gaussian sigma"},
           {"margin", "0", "bbox margin as a fraction of each side"},
       }},
      {"train",
       {
           {"data", "", "dataset root with train/ and val/", true},
           {"out", "", "output directory", true},
           {"seed", "", "run seed", true},
           {"model", "cnn", "cnn | convae"},
           {"image_size", "64", "network input side"},
           {"block_channels", "16,32,64", "channels per conv block"},
           {"convs_per_block", "1,1,1", "convs in each block"},
           {"fc_dims", "128,3", "cnn fully-connected widths"},
           {"residual", "false", "shortcut connections inside blocks"},
           {"dropout", "0.5", "cnn fc dropout"},
           {"classifier_dims", "1024,128,3", "convae classifier widths"},
           {"classifier_dropout", "0.4", "convae classifier dropout"},
           {"alpha", "0.05", "convae reconstruction weight"},
           {"optimizer", "adam", "adam | sgd"},
           {"lr", "1e-4", "initial learning rate"},
           {"momentum", "0.9", "sgd momentum"},
           {"schedule", "auto", "none | step | plateau | auto (cnn: none, convae: plateau)"},
           {"step_every", "15", "step decay period"},
           {"step_factor", "0.1", "step decay factor"},
           {"plateau_patience", "8", "plateau patience"},
           {"plateau_factor", "0.2", "plateau factor"},
           {"batch_size", "auto", "batch size (auto: cnn 32, convae 64)"},
           {"max_epochs", "60", "epoch limit"},
           {"early_stop_patience", "20", "epochs without improvement before stopping"},
           {"augment", "true", "random flips, brightness, contrast, rotation, zoom"},
           {"scaling", "simple", "simple | dataset | fixed"},
           {"verbose", "false", "per-epoch progress"},
       }},
      {"eval",
       {
           {"checkpoint", "", "model file", true},
           {"data", "", "dataset root or split directory", true},
           {"split", "test", "train | val | test"},
           {"out", "", "output directory (default: beside the checkpoint)"},
       }},
      {"explain",
       {
           {"checkpoint", "", "model file", true},
           {"data", "", "dataset root or split directory", true},
           {"split", "test", "train | val | test"},
           {"mode", "saliency", "saliency | pca | rank"},
           {"out", "", "output directory (default: beside the checkpoint)"},
           {"components", "2", "pca components"},
           {"limit", "0", "saliency: first n images only (0 = all)"},
       }},
      {"gradcheck",
       {
           {"model", "all", "cnn | convae | all"},
           {"seed", "0", "weights, inputs and sampled coordinates"},
           {"size", "32", "input side"},
           {"batch", "4", "batch size"},
           {"coords", "6", "coordinates sampled per tensor (0 = all)"},
           {"step", "1e-3", "finite-difference step"},
           {"tolerance", "1e-3", "maximum relative error"},
           {"inject_fault", "false", "corrupt one gradient (negative control)"},
           {"out", "", "optional report directory"},
       }},
  };
  return table;
}

}  // namespace

RunConfig::RunConfig(std::string command, std::vector<ConfigKey> schema)
    : command_(std::move(command)), schema_(std::move(schema)) {
  for (const auto& k : schema_) {
    if (!k.default_value.empty()) values_[k.name] = k.default_value;
  }
}

void RunConfig::set(std::string key, std::string value) {
  key = canonical_key(trim(key));
  if (key == "command") {
    if (trim(value) != command_) throw UsageError("config is for command '" + trim(value) + "', not '" + command_ + "'");
    return;
  }
  const auto it = std::find_if(schema_.begin(), schema_.end(), [&](const ConfigKey& k) { return k.name == key; });
  if (it == schema_.end()) throw UsageError("unknown config key '" + key + "' for command " + command_);
  value = trim(value);
  if (value.empty()) {
    values_.erase(key);
  } else {
    values_[key] = value;
  }
}

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    set(t.substr(0, eq), t.substr(eq + 1));
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  merge_text(text.str(), path.string());
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw UsageError(command_ + ": --" + key + " is not set");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }

double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("config: " + key + " = '" + v + "' is not a boolean");
}

std::vector<int> RunConfig::get_ints(const std::string& key) const {
  std::vector<int> out;
  for (const auto& item : split_list(get(key))) out.push_back(parse_number<int>(key, item));
  return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(get(key))) out.push_back(parse_number<double>(key, item));
  return out;
}

void RunConfig::check_required() const {
  for (const auto& k : schema_) {
    if (k.required && !has(k.name)) throw UsageError(command_ + ": --" + k.name + " is required");
  }
}

std::string RunConfig::serialize() const {
  std::string out = "command = " + command_ + "\n";
  for (const auto& k : schema_) {
    const auto it = values_.find(k.name);
    out += k.name + " = " + (it == values_.end() ? std::string() : it->second) + "\n";
  }
  return out;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth", "segment", "train", "eval", "explain", "gradcheck"};
  return names;
}

RunConfig make_config(const std::string& command) {
  const auto it = schemas().find(command);
  if (it == schemas().end()) throw UsageError("unknown command '" + command + "'");
  return RunConfig(command, it->second);
}

void log_run_config(const std::filesystem::path& dir, const RunConfig& config) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "run_config.txt";
  std::ofstream out(path, std::ios::binary);
  out << config.serialize();
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace mg
