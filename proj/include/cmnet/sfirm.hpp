#pragma once

#include <memory>
#include <vector>

#include "cmnet/backbones.hpp"

namespace cmnet {

// Sizes of `parts` consecutive pieces of an extent: floor(d / parts) each, with
// the remainder handed one unit at a time to the last pieces.
std::vector<std::size_t> split_extents(std::size_t extent, std::size_t parts);

// Row-major sqrt(parts) x sqrt(parts) tiles; parts in {1, 4, 9}.
template <typename T>
std::vector<Var<T>> spatial_division(const Var<T>& map, std::size_t parts);
template <typename T>
Var<T> spatial_join(const std::vector<Var<T>>& tiles);

// Contiguous channel slices. Without `ragged`, groups must divide C.
template <typename T>
std::vector<Var<T>> channel_division(const Var<T>& map, std::size_t groups, bool ragged = false);
template <typename T>
Var<T> channel_join(const std::vector<Var<T>>& groups);

// Channel gate sigmoid(MLP(avgpool) + MLP(maxpool)) with a shared two-layer
// bias-free MLP at reduction ratio 16.
template <typename T>
class ChannelAttention {
 public:
  static constexpr std::size_t kReduction = 16;

  ChannelAttention(std::size_t channels, Rng& rng);
  Var<T> gate(const Var<T>& part) const;  // N x C
  Var<T> operator()(const Var<T>& part) const;
  void collect(const std::string& prefix, ParameterRegistry<T>& registry) const;
  bool force_unit_gate = false;
  std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_;
  Linear<T> fc1_, fc2_;
};

// Spatial gate sigmoid(conv7x7([mean_c, max_c])), one value per location.
template <typename T>
class SpatialAttention {
 public:
  static constexpr std::size_t kKernel = 7;

  explicit SpatialAttention(Rng& rng);
  Var<T> gate(const Var<T>& group) const;  // N x 1 x H x W
  Var<T> operator()(const Var<T>& group) const;
  void collect(const std::string& prefix, ParameterRegistry<T>& registry) const;
  bool force_unit_gate = false;

 private:
  Conv2d<T> conv_;
};

template <typename T>
struct SfirmOutput {
  Var<T> r;        // Basic Network II output (or the input when it is disabled)
  Var<T> o_se;     // after the spatial-division / channel-attention phase
  Var<T> refined;  // after the channel-division / spatial-attention phase
};

template <typename T>
class Sfirm {
 public:
  Sfirm(const ModelConfig& config, Rng& rng);

  SfirmOutput<T> operator()(const Var<T>& o_cmem, bool training);

  // Test hook: every multiplicative weight (inner gates and the outer fusion
  // weights) becomes exactly 1.
  void set_force_unit_gates(bool on);

  void collect(const std::string& prefix, ParameterRegistry<T>& registry);
  FeatureExtractor<T>* basic_network_ii() const { return refine_.get(); }
  std::size_t out_channels() const;
  const ModelConfig& config() const { return config_; }

 private:
  Var<T> combine(const Var<T>& joined, const Var<T>& running) const;

  ModelConfig config_;
  std::shared_ptr<FeatureExtractor<T>> refine_;
  std::vector<ChannelAttention<T>> channel_attention_;
  std::vector<SpatialAttention<T>> spatial_attention_;
  bool force_unit_ = false;
};

}  // namespace cmnet
