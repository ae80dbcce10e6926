#pragma once

#include <cstddef>
#include <optional>
#include <string>

namespace cmnet {

// Which of the three Basic Network I branches (SB, UB, LB) own parameters.
enum class SharingPolicy {
  all_shared,     // SB, UB and LB are one parameter set
  halves_shared,  // UB and LB share one set, SB owns another
  independent,    // three sets
};

enum class AttentionMode {
  none,        // SFIRM reduced to Basic Network II
  plain_cbam,  // channel then spatial attention on the whole map, no division
  divided,     // division-based refinement per DivisionSpec
};

struct DivisionSpec {
  std::size_t spatial_parts = 4;   // 1, 4 or 9 tiles
  std::size_t channel_groups = 4;  // contiguous channel slices
  // Allow groups that do not divide the channel count; the remainder goes to
  // the last groups, one channel each. Needed for 9 groups over 512 channels.
  bool ragged_channels = false;

  std::size_t grid_side() const;
  void validate() const;
};

struct ModelConfig {
  std::size_t input_channels = 3;
  std::size_t num_classes = 7;
  std::size_t input_size = 224;
  SharingPolicy sharing = SharingPolicy::all_shared;
  bool use_cmem = true;
  bool use_basic_network_ii = true;
  AttentionMode attention = AttentionMode::divided;
  DivisionSpec division;
  // Pass joined attention maps through a sigmoid before the multiplicative
  // fusion. Off gives the raw-product variant.
  bool sigmoid_gates = true;
  // One channel-attention MLP for all spatial tiles (and one spatial-attention
  // conv for all channel groups) instead of one per tile/group.
  bool shared_tile_attention = false;
  bool use_symmetry_loss = true;
  double alpha = 0.9;
  bool mirror_right = false;
  std::optional<char> ablation_row;

  // Weight of the global loss actually applied; 1 when the symmetry term is off.
  double effective_alpha() const { return use_symmetry_loss ? alpha : 1.0; }
  void validate() const;
};

// Rows of the ablation matrix: a (backbone only) .. i (S9C9). Row h is the
// default full model.
ModelConfig ablation_config(ModelConfig base, char row);
std::string ablation_description(char row);
bool is_ablation_row(char row);

std::string to_string(SharingPolicy policy);
SharingPolicy parse_sharing_policy(const std::string& text);
std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

}  // namespace cmnet
