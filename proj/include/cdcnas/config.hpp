#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cdcnas/errors.hpp"

namespace cdcnas {

/// One configuration key: its default, the commands that accept it and,
/// where a command needs a different starting point, a per-command default.
struct KeyDef {
  std::string name;
  std::string fallback;
  std::vector<std::string> commands;
  std::string help;
  std::map<std::string, std::string> command_default;
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth", "search-backbone", "search-lateral", "derive",      "train",
                                              "eval",  "gradcheck",       "bench",          "theta-sweep", "ablation"};
  return names;
}

inline const std::vector<KeyDef>& config_keys() {
  const std::string all = "*";
  const std::vector<std::string> synth{"synth", "theta-sweep"};
  const std::vector<std::string> net{"search-backbone", "search-lateral", "train", "theta-sweep", "ablation"};
  const std::vector<std::string> search{"search-backbone", "search-lateral", "ablation"};
  const std::vector<std::string> train{"train", "theta-sweep", "ablation"};
  const std::vector<std::string> uses_data{"search-backbone", "search-lateral", "train", "eval", "ablation"};
  auto plus = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  static const std::vector<KeyDef> keys{
      {"seed", "0", {all}, "global seed", {}},
      {"out", "", {all}, "run directory (relative paths resolve against the run root)", {}},
      {"data", "data", uses_data, "dataset directory written by synth", {}},

      {"classes", "left-sweep,right-sweep,up-sweep,circle,zigzag,hold-then-flick", synth, "gesture classes",
       {{"theta-sweep", "left-sweep,right-sweep"}}},
      {"per_class", "64", synth, "clips per class", {{"theta-sweep", "24"}}},
      {"frames", "64", synth, "source frames per clip", {{"theta-sweep", "16"}}},
      {"size", "48", synth, "frame height and width", {{"theta-sweep", "16"}}},
      {"radius", "5", synth, "blob radius in pixels", {{"theta-sweep", "2"}}},
      {"rgb_noise", "0.04", synth, "RGB pixel noise sd", {}},
      {"depth_noise", "0", synth, "depth pixel noise sd", {}},
      {"texture", "0.25", synth, "background texture amplitude", {}},
      {"train_ratio", "0.5", synth, "train fraction per class", {}},
      {"val_ratio", "0.25", synth, "val fraction per class", {}},

      {"modalities", "rgb,depth", plus(net, {"eval"}), "modalities", {{"theta-sweep", "rgb"}}},
      {"rates", "8,16,32", plus(net, {"derive"}), "frames per branch", {{"theta-sweep", "16"}}},
      {"channels", "24,16,8", {"search-backbone", "search-lateral", "theta-sweep", "ablation"},
       "cell width per rate of searched (theta-sweep: fixed) networks", {{"theta-sweep", "4"}}},
      {"cells", "8", {"search-backbone", "search-lateral", "theta-sweep", "ablation"},
       "cells per branch of searched (theta-sweep: fixed) networks", {{"theta-sweep", "3"}}},
      {"train_channels", "24,16,8", {"train", "ablation"}, "cell width per rate of trained networks", {}},
      {"train_cells", "8", {"train", "ablation"}, "cells per branch of trained networks", {}},
      {"crop", "40", net, "spatial crop", {{"theta-sweep", "14"}}},
      {"flip", "0", net, "horizontal flip probability", {}},

      {"registry", "cdc", {"search-backbone", "search-lateral"}, "candidate set: cdc | vanilla", {}},
      {"theta_t", "0.6", search, "theta of CDC-T candidates", {}},
      {"theta_tr", "0.3", search, "theta of CDC-TR candidates", {}},
      {"partial_k", "2", {"search-backbone", "ablation"}, "partial channel factor K", {}},
      {"edge_norm", "true", {"search-backbone", "ablation"}, "edge normalisation", {}},
      {"shared_cells", "false", {"search-backbone", "ablation"}, "one cell topology per modality", {}},
      {"shared_levels", "false", {"search-lateral"}, "one lateral choice for all three levels", {}},
      {"genotype", "", {"search-lateral", "train"}, "genotype file", {}},
      {"laterals", "auto", {"train"}, "auto | none | fixed | discrete", {}},

      {"search_epochs", "10", search, "search epochs", {}},
      {"freeze_epochs", "3", search, "epochs before architecture updates start", {}},
      {"search_batch", "8", search, "search batch size", {}},
      {"arch_lr", "6e-4", search, "architecture learning rate", {}},
      {"arch_weight_decay", "1e-3", search, "architecture weight decay", {}},
      {"decay_epoch", "7", search, "epoch at which the weight lr decays", {}},
      {"decay_factor", "0.5", search, "search lr decay factor", {}},
      {"train_epochs", "40", train, "training epochs", {{"theta-sweep", "12"}}},
      {"train_batch", "8", train, "training batch size", {}},
      {"patience", "3", train, "plateau patience", {}},
      {"plateau_factor", "0.1", train, "plateau lr factor", {}},
      {"lr", "1e-2", plus(search, train), "weight learning rate", {}},
      {"momentum", "0.9", plus(search, train), "SGD momentum", {}},
      {"weight_decay", "5e-5", plus(search, train), "SGD weight decay", {}},
      {"grad_clip", "5", plus(search, train), "gradient norm clip", {}},

      {"alpha", "", {"derive"}, "alpha.csv files", {}},
      {"model", "", {"eval"}, "model directories", {}},
      {"split", "test", {"eval"}, "train | val | test", {}},
      {"fusion", "none", {"eval"}, "none | mean-softmax", {}},

      {"fd_step", "1e-4", {"gradcheck"}, "finite-difference step", {}},
      {"tolerance", "1e-3", {"gradcheck"}, "max relative error", {}},

      {"bench_channels", "16", {"bench"}, "channels in and out", {}},
      {"bench_frames", "16", {"bench"}, "frames", {}},
      {"bench_size", "32", {"bench"}, "height and width", {}},
      {"bench_kernel", "3", {"bench"}, "cubic kernel extent", {}},
      {"bench_batch", "1", {"bench"}, "batch", {}},
      {"repeats", "7", {"bench"}, "timed repetitions (median reported)", {}},
      {"theta", "0.6", {"bench"}, "theta of the benchmarked CDC layers", {}},

      {"variants", "st,t,tr", {"theta-sweep"}, "CDC variants", {}},
      {"thetas", "0,0.2,0.4,0.6,0.8,1", {"theta-sweep"}, "theta grid", {}},
      {"seeds", "0,1,2", {"theta-sweep"}, "seed list", {}},
  };
  return keys;
}

inline const KeyDef* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline bool key_applies(const KeyDef& k, const std::string& command) {
  return std::find(k.commands.begin(), k.commands.end(), "*") != k.commands.end() ||
         std::find(k.commands.begin(), k.commands.end(), command) != k.commands.end();
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Resolved key = value settings of one command. Values start at their
/// defaults, then a config file, then command-line flags.
class RunConfig {
 public:
  explicit RunConfig(std::string command) : command_(std::move(command)) {
    if (std::find(command_names().begin(), command_names().end(), command_) == command_names().end()) {
      throw ConfigError("unknown command '" + command_ + "'");
    }
    for (const auto& k : config_keys()) {
      if (!key_applies(k, command_)) continue;
      auto it = k.command_default.find(command_);
      values_[k.name] = it != k.command_default.end() ? it->second : k.fallback;
    }
    if (values_.at("out").empty()) values_["out"] = command_;
  }

  const std::string& command() const { return command_; }

  void set(const std::string& key, const std::string& value) {
    const KeyDef* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    if (!key_applies(*k, command_)) throw ConfigError("key '" + key + "' does not apply to " + command_);
    values_[key] = trim(value);
  }

  /// Flat "key = value" lines; '#' starts a comment. Keys that belong to
  /// other commands are skipped, so one file can drive a whole pipeline.
  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
      }
      const std::string key = trim(line.substr(0, eq));
      if (const KeyDef* k = find_key(key); k && !key_applies(*k, command_)) continue;
      try {
        set(key, line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("config file not found: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path);
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("key '" + key + "' is not defined for " + command_);
    return it->second;
  }

  long integer(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t pos = 0;
      const long out = std::stol(v, &pos);
      if (pos == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }

  double real(const std::string& key) const { return parse_real(key, str(key)); }

  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
  }

  std::vector<std::string> list(const std::string& key) const { return split_list(str(key)); }

  std::vector<long> integers(const std::string& key) const {
    std::vector<long> out;
    for (const auto& item : list(key)) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stol(item, &pos));
        if (pos != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected integers, got '" + str(key) + "'");
      }
    }
    return out;
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : list(key)) out.push_back(parse_real(key, item));
    return out;
  }

  /// Sorted "key = value" lines; merging this text back reproduces the config.
  std::string dump() const {
    std::string out = "# " + command_ + "\n";
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static double parse_real(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double out = std::stod(v, &pos);
      if (pos == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }

  std::string command_;
  std::map<std::string, std::string> values_;
};

/// Relative paths resolve against $CDCNAS_RUN_ROOT when it is set.
inline std::filesystem::path resolve_path(const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("CDCNAS_RUN_ROOT"); root && *root) return std::filesystem::path(root) / path;
  return path;
}

}  // namespace cdcnas
