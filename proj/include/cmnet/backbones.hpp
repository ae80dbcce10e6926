#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cmnet/layers.hpp"
#include "cmnet/model_config.hpp"
#include "cmnet/serialization.hpp"

namespace cmnet {

template <typename T>
class BasicBlock {
 public:
  BasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride, Rng& rng);

  Var<T> operator()(const Var<T>& x, bool training);
  void collect(const std::string& prefix, ParameterRegistry<T>& registry);

 private:
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
  bool has_downsample_ = false;
  Conv2d<T> down_conv_;
  BatchNorm2d<T> down_bn_;
};

// A run of residual stages, optionally led by the 7x7 stem and max pool.
// Parameter names follow the 18-layer reference layout ("conv1.weight",
// "bn1.running_mean", "layer2.0.downsample.0.weight", ...), so converted
// reference weights load by key.
template <typename T>
class FeatureExtractor {
 public:
  struct StageSpec {
    std::string name;  // "layer1" .. "layer4"
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t stride;
  };

  FeatureExtractor(std::string kind, bool with_stem, std::size_t in_channels,
                   const std::vector<StageSpec>& stages, Rng& rng);

  Var<T> operator()(const Var<T>& x, bool training);

  const std::string& kind() const noexcept { return kind_; }
  std::size_t in_channels() const noexcept { return in_channels_; }
  std::size_t out_channels() const noexcept { return out_channels_; }
  std::size_t stride_product() const noexcept { return stride_product_; }
  std::size_t stage_count() const noexcept { return stages_.size(); }
  // N x C x H x W -> N x out_channels x ceil(H/s) x ceil(W/s)
  Shape output_shape(const Shape& input) const;

  void collect(const std::string& prefix, ParameterRegistry<T>& registry);
  // Parameters plus running statistics.
  std::size_t tensor_count();
  // Copies every tensor of this extractor from `table`; keys are the
  // reference names. Returns the number of tensors copied.
  std::size_t load_from(const TensorTable& table);

 private:
  std::string kind_;
  bool with_stem_;
  std::size_t in_channels_;
  std::size_t out_channels_;
  std::size_t stride_product_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::vector<std::pair<std::string, std::vector<BasicBlock<T>>>> stages_;
};

// Stem + stages 1-3 of the 18-layer residual reference network: 3 -> 256
// channels, downsampling 16.
template <typename T>
std::shared_ptr<FeatureExtractor<T>> build_basic_network_i(const ModelConfig& config, Rng& rng);

// Stage 4 of the reference network (two blocks, four 3x3 convolutions):
// 256 -> 512 channels, downsampling 2.
template <typename T>
std::shared_ptr<FeatureExtractor<T>> build_basic_network_ii(const ModelConfig& config, Rng& rng);

// The three Basic Network I branches. Aliased pointers share parameters.
template <typename T>
struct BranchSet {
  SharingPolicy policy = SharingPolicy::all_shared;
  std::shared_ptr<FeatureExtractor<T>> sb, ub, lb;

  // Distinct parameter sets with their registry prefixes.
  std::vector<std::pair<std::string, std::shared_ptr<FeatureExtractor<T>>>> distinct() const;
};

// Builds SB always and UB/LB when `with_halves`; UB/LB alias SB per policy.
template <typename T>
BranchSet<T> build_branches(const ModelConfig& config, bool with_halves, Rng& rng);

// Copies stem + stages 1-3 into every distinct Basic Network I instance and
// stage 4 into `refine` (when present). Returns the number of tensors copied.
template <typename T>
std::size_t load_pretrained(const TensorTable& weights, const BranchSet<T>& branches,
                            FeatureExtractor<T>* refine);

}  // namespace cmnet
