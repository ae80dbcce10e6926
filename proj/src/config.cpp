#include "cmnet/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cmnet/errors.hpp"

namespace pt = boost::property_tree;

namespace cmnet {

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

std::string bool_text(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "': expected a boolean, got '" + v + "'");
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::array<float, 3> parse_triple(const std::string& key, const std::string& v) {
  std::array<float, 3> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 3) break;
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b == std::string::npos) break;
    out[i++] = static_cast<float>(parse_real(key, item.substr(b, e - b + 1)));
  }
  if (i != 3 || std::getline(ss, item, ',')) {
    throw ConfigError("'" + key + "': expected three comma-separated numbers, got '" + v + "'");
  }
  return out;
}

// shortest text that round-trips the float itself, so 0.485f prints as 0.485
std::string float_text(float value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string triple_text(const std::array<float, 3>& t) {
  return float_text(t[0]) + "," + float_text(t[1]) + "," + float_text(t[2]);
}

}  // namespace

KeyValues to_key_values(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  return {
      {"model.num_classes", std::to_string(m.num_classes)},
      {"model.input_channels", std::to_string(m.input_channels)},
      {"model.input_size", std::to_string(m.input_size)},
      {"model.sharing", to_string(m.sharing)},
      {"model.use_cmem", bool_text(m.use_cmem)},
      {"model.use_basic_network_ii", bool_text(m.use_basic_network_ii)},
      {"model.attention", to_string(m.attention)},
      {"model.spatial_parts", std::to_string(m.division.spatial_parts)},
      {"model.channel_groups", std::to_string(m.division.channel_groups)},
      {"model.ragged_channels", bool_text(m.division.ragged_channels)},
      {"model.sigmoid_gates", bool_text(m.sigmoid_gates)},
      {"model.shared_tile_attention", bool_text(m.shared_tile_attention)},
      {"model.use_symmetry_loss", bool_text(m.use_symmetry_loss)},
      {"model.alpha", format_number(m.alpha)},
      {"model.mirror_right", bool_text(m.mirror_right)},
      {"model.ablation_row", m.ablation_row ? std::string(1, *m.ablation_row) : std::string()},
      {"train.optimizer", to_string(c.optimizer)},
      {"train.lr", format_number(c.lr)},
      {"train.momentum", format_number(c.momentum)},
      {"train.weight_decay", format_number(c.weight_decay)},
      {"train.beta1", format_number(c.beta1)},
      {"train.beta2", format_number(c.beta2)},
      {"train.adam_eps", format_number(c.adam_eps)},
      {"train.schedule", to_string(c.schedule.kind)},
      {"train.schedule_factor", format_number(c.schedule.factor)},
      {"train.schedule_every", std::to_string(c.schedule.every)},
      {"train.batch_size", std::to_string(c.batch_size)},
      {"train.epochs", std::to_string(c.epochs)},
      {"train.seed", std::to_string(c.seed)},
      {"train.sampling", to_string(c.sampling)},
      {"train.augment", bool_text(c.augment)},
      {"train.crop_padding", std::to_string(c.crop_padding)},
      {"data.mean", triple_text(c.norm.mean)},
      {"data.std", triple_text(c.norm.stddev)},
      {"data.grayscale_expand", bool_text(c.grayscale_expand)},
  };
}

KeyValues to_key_values(const RunConfig& c) {
  KeyValues kv = to_key_values(c.train);
  kv["data.source"] = c.data.source;
  kv["data.train_dir"] = c.data.train_dir;
  kv["data.val_dir"] = c.data.val_dir;
  kv["data.test_dir"] = c.data.test_dir;
  kv["data.synth_classes"] = std::to_string(c.data.synth_classes);
  kv["data.synth_per_class"] = std::to_string(c.data.synth_per_class);
  kv["data.synth_val_per_class"] = std::to_string(c.data.synth_val_per_class);
  kv["data.synth_size"] = std::to_string(c.data.synth_size);
  kv["data.synth_asymmetry"] = format_number(c.data.synth_asymmetry);
  kv["train.pretrained"] = c.pretrained;
  return kv;
}

void apply_key_value(TrainConfig& c, const std::string& key, const std::string& v) {
  ModelConfig& m = c.model;
  const auto u = [&] { return static_cast<std::size_t>(parse_uint(key, v)); };
  const auto r = [&] { return parse_real(key, v); };
  const auto b = [&] { return parse_bool(key, v); };
  if (key == "model.num_classes") m.num_classes = u();
  else if (key == "model.input_channels") m.input_channels = u();
  else if (key == "model.input_size") m.input_size = u();
  else if (key == "model.sharing") m.sharing = parse_sharing_policy(v);
  else if (key == "model.use_cmem") m.use_cmem = b();
  else if (key == "model.use_basic_network_ii") m.use_basic_network_ii = b();
  else if (key == "model.attention") m.attention = parse_attention_mode(v);
  else if (key == "model.spatial_parts") m.division.spatial_parts = u();
  else if (key == "model.channel_groups") m.division.channel_groups = u();
  else if (key == "model.ragged_channels") m.division.ragged_channels = b();
  else if (key == "model.sigmoid_gates") m.sigmoid_gates = b();
  else if (key == "model.shared_tile_attention") m.shared_tile_attention = b();
  else if (key == "model.use_symmetry_loss") m.use_symmetry_loss = b();
  else if (key == "model.alpha") m.alpha = r();
  else if (key == "model.mirror_right") m.mirror_right = b();
  else if (key == "model.ablation_row") {
    if (v.empty()) {
      m.ablation_row.reset();
    } else if (v.size() == 1 && is_ablation_row(v[0])) {
      m.ablation_row = v[0];
    } else {
      throw ConfigError("'" + key + "': unknown ablation row '" + v + "', expected a..i");
    }
  }
  else if (key == "train.optimizer") c.optimizer = parse_optimizer(v);
  else if (key == "train.lr") c.lr = r();
  else if (key == "train.momentum") c.momentum = r();
  else if (key == "train.weight_decay") c.weight_decay = r();
  else if (key == "train.beta1") c.beta1 = r();
  else if (key == "train.beta2") c.beta2 = r();
  else if (key == "train.adam_eps") c.adam_eps = r();
  else if (key == "train.schedule") c.schedule.kind = parse_schedule(v);
  else if (key == "train.schedule_factor") c.schedule.factor = r();
  else if (key == "train.schedule_every") c.schedule.every = u();
  else if (key == "train.batch_size") c.batch_size = u();
  else if (key == "train.epochs") c.epochs = u();
  else if (key == "train.seed") c.seed = parse_uint(key, v);
  else if (key == "train.sampling") c.sampling = parse_sampling_policy(v);
  else if (key == "train.augment") c.augment = b();
  else if (key == "train.crop_padding") c.crop_padding = u();
  else if (key == "data.mean") c.norm.mean = parse_triple(key, v);
  else if (key == "data.std") c.norm.stddev = parse_triple(key, v);
  else if (key == "data.grayscale_expand") c.grayscale_expand = b();
  else throw ConfigError("unknown configuration key '" + key + "'");
}

void apply_key_value(RunConfig& c, const std::string& key, const std::string& v) {
  DataConfig& d = c.data;
  if (key == "data.source") {
    if (v != "synthetic" && v != "folder") {
      throw ConfigError("'data.source': expected synthetic or folder, got '" + v + "'");
    }
    d.source = v;
  } else if (key == "data.train_dir") d.train_dir = v;
  else if (key == "data.val_dir") d.val_dir = v;
  else if (key == "data.test_dir") d.test_dir = v;
  else if (key == "data.synth_classes") d.synth_classes = parse_uint(key, v);
  else if (key == "data.synth_per_class") d.synth_per_class = parse_uint(key, v);
  else if (key == "data.synth_val_per_class") d.synth_val_per_class = parse_uint(key, v);
  else if (key == "data.synth_size") d.synth_size = parse_uint(key, v);
  else if (key == "data.synth_asymmetry") d.synth_asymmetry = parse_real(key, v);
  else if (key == "train.pretrained") c.pretrained = v;
  else apply_key_value(c.train, key, v);
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    if (section != "model" && section != "train" && section != "data") {
      if (body.empty()) {
        throw ConfigError(origin + ": key '" + section + "' must sit inside a section");
      }
      throw ConfigError(origin + ": unknown section [" + section + "]");
    }
    for (const auto& [key, leaf] : body) {
      if (!leaf.empty()) throw ConfigError(origin + ": nested key under [" + section + "]");
      const std::string full = section + "." + key;
      try {
        apply_key_value(config, full, leaf.data());
      } catch (const ConfigError& e) {
        // property_tree does not keep line numbers, so find the line by hand
        std::istringstream scan(text);
        std::string line, current;
        std::size_t number = 0, found = 0;
        while (std::getline(scan, line)) {
          ++number;
          const auto b = line.find_first_not_of(" \t");
          if (b == std::string::npos) continue;
          if (line[b] == '[') {
            current = line.substr(b + 1, line.find(']') - b - 1);
          } else if (current == section && line.compare(b, key.size(), key) == 0) {
            found = number;
            break;
          }
        }
        throw ConfigError(origin + ":" + std::to_string(found) + ": " + e.what());
      }
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + item + "' is not of the form section.key=value");
    }
    apply_key_value(config, item.substr(0, eq), item.substr(eq + 1));
  }
}

std::string render_ini(const RunConfig& config) {
  std::map<std::string, std::map<std::string, std::string>> sections;
  for (const auto& [key, value] : to_key_values(config)) {
    const auto dot = key.find('.');
    sections[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  std::ostringstream out;
  bool first = true;
  for (const char* name : {"model", "train", "data"}) {
    if (!first) out << '\n';
    first = false;
    out << '[' << name << "]\n";
    for (const auto& [key, value] : sections[name]) out << key << " = " << value << '\n';
  }
  return out.str();
}

}  // namespace cmnet
