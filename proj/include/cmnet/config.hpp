#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cmnet/engine.hpp"

namespace cmnet {

// Where training/evaluation images come from.
struct DataConfig {
  std::string source = "synthetic";  // synthetic | folder
  std::string train_dir, val_dir, test_dir;
  std::size_t synth_classes = 2;
  std::size_t synth_per_class = 32;
  std::size_t synth_val_per_class = 0;
  std::size_t synth_size = 64;
  double synth_asymmetry = 0.0;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  std::string pretrained;  // optional 18-layer weight table, train.pretrained
};

// "section.key" -> value text
using KeyValues = std::map<std::string, std::string>;

KeyValues to_key_values(const TrainConfig& config);
KeyValues to_key_values(const RunConfig& config);
// Unknown keys and malformed values raise ConfigError naming the key.
void apply_key_value(TrainConfig& config, const std::string& key, const std::string& value);
void apply_key_value(RunConfig& config, const std::string& key, const std::string& value);

// INI document with [model], [train] and [data] sections. Parse failures raise
// ConfigError carrying the file name and line.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
// "key=value" overrides with dotted keys, applied after the file.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);
std::string render_ini(const RunConfig& config);

std::string format_number(double value);

}  // namespace cmnet
