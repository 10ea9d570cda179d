// SPDX-License-Identifier: Apache-2.0
//
// Run configuration files: UTF-8, one `key = value` per line, `#` starts a
// comment. Every key is optional; unknown keys are rejected.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rcfusion/data.hpp"
#include "rcfusion/error.hpp"
#include "rcfusion/fusion.hpp"
#include "rcfusion/optim.hpp"

namespace rcf {

enum class DatasetSource { Synthetic, Directory };
enum class Precision { F32, F64 };

struct RunConfig {
  DatasetSource dataset = DatasetSource::Synthetic;
  std::filesystem::path dataset_path;
  std::size_t split_index = 0;
  std::uint64_t split_seed = 0;
  bool augment = false;
  SyntheticSpec synthetic;

  std::size_t input_size = 16;
  std::string backbone = "desk";  // desk | micro
  std::size_t blocks_per_stage = 1;
  ModelConfig model;  // num_classes and backbone are filled in from the dataset / keys above

  std::size_t batch_size = 64;
  RmspropConfig optimizer;
  double max_norm = 4.0;

  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::size_t num_starts = 3;
  bool orthogonality = true;  // false removes the orthogonality term from the graph entirely

  std::filesystem::path output_dir = "run";
  bool record_wall_time = true;
  Precision precision = Precision::F32;
  std::size_t threads = 1;

  RunConfig() {
    model.pd = 16;
    model.mn = 8;
  }

  /// ModelConfig with the backbone resolved from the backbone keys.
  ModelConfig model_config(std::size_t num_classes) const {
    ModelConfig m = model;
    m.num_classes = num_classes;
    if (backbone == "desk") m.backbone = BackboneConfig::desk_scale(blocks_per_stage);
    else if (backbone == "micro") m.backbone = BackboneConfig::micro(blocks_per_stage);
    else throw ConfigError("model.backbone must be 'desk' or 'micro'");
    return m;
  }
};

namespace detail {

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V value{};
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  if constexpr (std::is_floating_point_v<V>) {
    // from_chars for floating point is not available everywhere yet
    std::size_t used = 0;
    try {
      value = static_cast<V>(std::stod(text, &used));
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != text.size()) throw ConfigError("key '" + key + "': not a number: '" + text + "'");
  } else {
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) throw ConfigError("key '" + key + "': not an integer: '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyHandler {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Getters share the setter accessors, hence the const_cast; they only read.
inline const std::map<std::string, KeyHandler>& config_keys() {
  using R = RunConfig;
  using S = const std::string&;
  static const std::map<std::string, KeyHandler> keys = [] {
    std::map<std::string, KeyHandler> k;
    auto size_key = [&](const char* name, auto member) {
      k[name] = {[=](R& c, S v) { std::invoke(member, c) = parse_number<std::size_t>(name, v); },
                 [=](const R& c) { return std::to_string(std::invoke(member, const_cast<R&>(c))); }};
    };
    auto u64_key = [&](const char* name, auto member) {
      k[name] = {[=](R& c, S v) { std::invoke(member, c) = parse_number<std::uint64_t>(name, v); },
                 [=](const R& c) { return std::to_string(std::invoke(member, const_cast<R&>(c))); }};
    };
    auto double_key = [&](const char* name, auto member) {
      k[name] = {[=](R& c, S v) { std::invoke(member, c) = parse_number<double>(name, v); },
                 [=](const R& c) { return format_double(std::invoke(member, const_cast<R&>(c))); }};
    };
    auto bool_key = [&](const char* name, auto member) {
      k[name] = {[=](R& c, S v) { std::invoke(member, c) = parse_bool(name, v); },
                 [=](const R& c) { return std::string(std::invoke(member, const_cast<R&>(c)) ? "true" : "false"); }};
    };

    k["dataset"] = {[](R& c, S v) {
                      if (v == "synthetic") c.dataset = DatasetSource::Synthetic;
                      else if (v == "directory") c.dataset = DatasetSource::Directory;
                      else throw ConfigError("dataset must be 'synthetic' or 'directory'");
                    },
                    [](const R& c) {
                      return std::string(c.dataset == DatasetSource::Synthetic ? "synthetic" : "directory");
                    }};
    k["dataset.path"] = {[](R& c, S v) { c.dataset_path = v; },
                         [](const R& c) { return c.dataset_path.string(); }};
    size_key("dataset.split_index", &R::split_index);
    u64_key("dataset.split_seed", &R::split_seed);
    bool_key("dataset.augment", &R::augment);

    k["synthetic.kind"] = {[](R& c, S v) {
                             if (v == "xor") c.synthetic.kind = SyntheticKind::Xor;
                             else if (v == "correlated") c.synthetic.kind = SyntheticKind::Correlated;
                             else throw ConfigError("synthetic.kind must be 'xor' or 'correlated'");
                           },
                           [](const R& c) {
                             return std::string(c.synthetic.kind == SyntheticKind::Xor ? "xor" : "correlated");
                           }};
    size_key("synthetic.num_classes", [](R& c) -> auto& { return c.synthetic.num_classes; });
    size_key("synthetic.samples_per_class", [](R& c) -> auto& { return c.synthetic.samples_per_class; });
    size_key("synthetic.instances_per_class", [](R& c) -> auto& { return c.synthetic.instances_per_class; });
    size_key("synthetic.image_size", [](R& c) -> auto& { return c.synthetic.image_size; });
    double_key("synthetic.noise", [](R& c) -> auto& { return c.synthetic.noise; });
    u64_key("synthetic.seed", [](R& c) -> auto& { return c.synthetic.seed; });

    size_key("model.input_size", &R::input_size);
    k["model.backbone"] = {[](R& c, S v) { c.backbone = v; }, [](const R& c) { return c.backbone; }};
    size_key("model.blocks_per_stage", &R::blocks_per_stage);
    size_key("model.tap_first", [](R& c) -> auto& { return c.model.tap_first; });
    size_key("model.tap_last", [](R& c) -> auto& { return c.model.tap_last; });
    bool_key("model.pooled_output", [](R& c) -> auto& { return c.model.pooled_output; });
    size_key("model.pd", [](R& c) -> auto& { return c.model.pd; });
    size_key("model.mn", [](R& c) -> auto& { return c.model.mn; });
    double_key("model.lambda_base", [](R& c) -> auto& { return c.model.lambda_base; });
    double_key("model.lambda_decay", [](R& c) -> auto& { return c.model.lambda_decay; });
    size_key("model.lambda_zero_above", [](R& c) -> auto& { return c.model.lambda_zero_above; });
    k["model.modality"] = {[](R& c, S v) {
                             if (v == "both") c.model.modality = ModalityMask::Both;
                             else if (v == "rgb") c.model.modality = ModalityMask::RgbOnly;
                             else if (v == "depth") c.model.modality = ModalityMask::DepthOnly;
                             else throw ConfigError("model.modality must be 'both', 'rgb' or 'depth'");
                           },
                           [](const R& c) {
                             switch (c.model.modality) {
                               case ModalityMask::RgbOnly: return std::string("rgb");
                               case ModalityMask::DepthOnly: return std::string("depth");
                               default: return std::string("both");
                             }
                           }};

    size_key("optim.batch_size", &R::batch_size);
    double_key("optim.learning_rate", [](R& c) -> auto& { return c.optimizer.learning_rate; });
    double_key("optim.alpha", [](R& c) -> auto& { return c.optimizer.alpha; });
    double_key("optim.momentum", [](R& c) -> auto& { return c.optimizer.momentum; });
    double_key("optim.weight_decay", [](R& c) -> auto& { return c.optimizer.weight_decay; });
    double_key("optim.eps", [](R& c) -> auto& { return c.optimizer.eps; });
    double_key("optim.max_norm", &R::max_norm);

    size_key("train.epochs", &R::epochs);
    u64_key("train.seed", &R::seed);
    size_key("train.num_starts", &R::num_starts);
    bool_key("train.orthogonality", &R::orthogonality);

    k["output.dir"] = {[](R& c, S v) { c.output_dir = v; }, [](const R& c) { return c.output_dir.string(); }};
    bool_key("output.wall_time", &R::record_wall_time);
    k["precision"] = {[](R& c, S v) {
                        if (v == "f32") c.precision = Precision::F32;
                        else if (v == "f64") c.precision = Precision::F64;
                        else throw ConfigError("precision must be 'f32' or 'f64'");
                      },
                      [](const R& c) { return std::string(c.precision == Precision::F32 ? "f32" : "f64"); }};
    size_key("threads", &R::threads);
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies one key; throws ConfigError for unknown keys or bad values.
inline void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, value);
}

inline RunConfig parse_config(std::istream& is) {
  RunConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    try {
      set_config_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

inline RunConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  return parse_config(is);
}

/// Every key with its current value, one per line, in key order.
inline std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, handler] : detail::config_keys()) out += key + " = " + handler.get(config) + "\n";
  return out;
}

}  // namespace rcf
