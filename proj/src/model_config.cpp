#include "cmnet/model_config.hpp"

#include <string>

#include "cmnet/errors.hpp"

namespace cmnet {

namespace {

// Side of the stride-16 Basic Network I map: stem conv, max pool and two
// strided stages each give ceil(x / 2).
std::size_t stride16_extent(std::size_t x) {
  for (int i = 0; i < 4; ++i) x = (x + 1) / 2;
  return x;
}

}  // namespace

std::size_t DivisionSpec::grid_side() const {
  switch (spatial_parts) {
    case 1:
      return 1;
    case 4:
      return 2;
    case 9:
      return 3;
    default:
      throw ConfigError("spatial_parts must be 1, 4 or 9, got " + std::to_string(spatial_parts));
  }
}

void DivisionSpec::validate() const {
  grid_side();
  if (channel_groups == 0) throw ConfigError("channel_groups must be positive");
}

void ModelConfig::validate() const {
  if (input_channels != 3) {
    throw ConfigError("input_channels must be 3, got " + std::to_string(input_channels));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (input_size < 32) throw ConfigError("input_size must be at least 32");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (!use_basic_network_ii && attention != AttentionMode::none) {
    throw ConfigError("attention refinement requires Basic Network II");
  }
  if (use_symmetry_loss && !use_cmem) {
    throw ConfigError("the symmetry loss needs the half-face branches (use_cmem)");
  }
  division.validate();
  const std::size_t full = stride16_extent(input_size);
  if (use_cmem) {
    const std::size_t halves = stride16_extent(input_size / 2) +
                               stride16_extent(input_size - input_size / 2);
    if (halves != full) {
      throw ConfigError("input_size " + std::to_string(input_size) +
                        ": half-face maps (" + std::to_string(halves) +
                        " columns) cannot tile the whole-face map (" + std::to_string(full) +
                        "); use a multiple of 32");
    }
  }
  if (attention == AttentionMode::divided) {
    const std::size_t refined = use_basic_network_ii ? (full + 1) / 2 : full;
    if (refined < division.grid_side()) {
      throw ConfigError("input_size " + std::to_string(input_size) + " gives a " +
                        std::to_string(refined) + "x" + std::to_string(refined) +
                        " refined map, too small for " + std::to_string(division.spatial_parts) +
                        " spatial parts");
    }
  }
}

bool is_ablation_row(char row) { return row >= 'a' && row <= 'i'; }

ModelConfig ablation_config(ModelConfig base, char row) {
  if (!is_ablation_row(row)) {
    throw ConfigError(std::string("unknown ablation row '") + row + "', expected a..i");
  }
  ModelConfig c = std::move(base);
  c.ablation_row = row;
  c.use_cmem = row >= 'c';
  c.use_basic_network_ii = row >= 'b';
  c.use_symmetry_loss = row >= 'd';
  c.division.ragged_channels = false;
  switch (row) {
    case 'a':
    case 'b':
    case 'c':
    case 'd':
      c.attention = AttentionMode::none;
      break;
    case 'e':
      c.attention = AttentionMode::plain_cbam;
      break;
    case 'f':
      c.attention = AttentionMode::divided;
      c.division.spatial_parts = 4;
      c.division.channel_groups = 1;
      break;
    case 'g':
      c.attention = AttentionMode::divided;
      c.division.spatial_parts = 1;
      c.division.channel_groups = 4;
      break;
    case 'h':
      c.attention = AttentionMode::divided;
      c.division.spatial_parts = 4;
      c.division.channel_groups = 4;
      break;
    case 'i':
      c.attention = AttentionMode::divided;
      c.division.spatial_parts = 9;
      c.division.channel_groups = 9;
      c.division.ragged_channels = true;
      break;
  }
  return c;
}

std::string ablation_description(char row) {
  switch (row) {
    case 'a':
      return "backbone";
    case 'b':
      return "+BN-II";
    case 'c':
      return "+CMEM";
    case 'd':
      return "+HFAOM";
    case 'e':
      return "+CBAM";
    case 'f':
      return "CBAM-S4";
    case 'g':
      return "CBAM-C4";
    case 'h':
      return "CBAM-S4C4";
    case 'i':
      return "CBAM-S9C9";
    default:
      throw ConfigError(std::string("unknown ablation row '") + row + "'");
  }
}

std::string to_string(SharingPolicy policy) {
  switch (policy) {
    case SharingPolicy::all_shared:
      return "all_shared";
    case SharingPolicy::halves_shared:
      return "halves_shared";
    case SharingPolicy::independent:
      return "independent";
  }
  return "?";
}

SharingPolicy parse_sharing_policy(const std::string& text) {
  if (text == "all_shared") return SharingPolicy::all_shared;
  if (text == "halves_shared") return SharingPolicy::halves_shared;
  if (text == "independent") return SharingPolicy::independent;
  throw ConfigError("unknown sharing policy '" + text + "'");
}

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::none:
      return "none";
    case AttentionMode::plain_cbam:
      return "plain_cbam";
    case AttentionMode::divided:
      return "divided";
  }
  return "?";
}

AttentionMode parse_attention_mode(const std::string& text) {
  if (text == "none") return AttentionMode::none;
  if (text == "plain_cbam") return AttentionMode::plain_cbam;
  if (text == "divided") return AttentionMode::divided;
  throw ConfigError("unknown attention mode '" + text + "'");
}

}  // namespace cmnet
