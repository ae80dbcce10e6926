#include "cmnet/backbones.hpp"

namespace cmnet {

template <typename T>
BasicBlock<T>::BasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                          Rng& rng)
    : conv1_(in_channels, out_channels, 3, stride, 1, false, rng),
      conv2_(out_channels, out_channels, 3, 1, 1, false, rng),
      bn1_(out_channels),
      bn2_(out_channels) {
  if (stride != 1 || in_channels != out_channels) {
    has_downsample_ = true;
    down_conv_ = Conv2d<T>(in_channels, out_channels, 1, stride, 0, false, rng);
    down_bn_ = BatchNorm2d<T>(out_channels);
  }
}

template <typename T>
Var<T> BasicBlock<T>::operator()(const Var<T>& x, bool training) {
  Var<T> out = relu(bn1_(conv1_(x), training));
  out = bn2_(conv2_(out), training);
  Var<T> shortcut = has_downsample_ ? down_bn_(down_conv_(x), training) : x;
  return relu(add(out, shortcut));
}

template <typename T>
void BasicBlock<T>::collect(const std::string& prefix, ParameterRegistry<T>& registry) {
  conv1_.collect(prefix + "conv1.", registry);
  bn1_.collect(prefix + "bn1.", registry);
  conv2_.collect(prefix + "conv2.", registry);
  bn2_.collect(prefix + "bn2.", registry);
  if (has_downsample_) {
    down_conv_.collect(prefix + "downsample.0.", registry);
    down_bn_.collect(prefix + "downsample.1.", registry);
  }
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(std::string kind, bool with_stem, std::size_t in_channels,
                                      const std::vector<StageSpec>& stages, Rng& rng)
    : kind_(std::move(kind)),
      with_stem_(with_stem),
      in_channels_(in_channels),
      out_channels_(in_channels),
      stride_product_(1) {
  if (with_stem_) {
    stem_conv_ = Conv2d<T>(in_channels, 64, 7, 2, 3, false, rng);
    stem_bn_ = BatchNorm2d<T>(64);
    out_channels_ = 64;
    stride_product_ = 4;  // stride-2 conv, stride-2 max pool
  }
  for (const StageSpec& spec : stages) {
    if (spec.in_channels != out_channels_) {
      throw ConfigError(kind_ + ": stage " + spec.name + " expects " +
                        std::to_string(spec.in_channels) + " input channels, previous stage has " +
                        std::to_string(out_channels_));
    }
    std::vector<BasicBlock<T>> blocks;
    blocks.emplace_back(spec.in_channels, spec.out_channels, spec.stride, rng);
    blocks.emplace_back(spec.out_channels, spec.out_channels, 1, rng);
    stages_.emplace_back(spec.name, std::move(blocks));
    out_channels_ = spec.out_channels;
    stride_product_ *= spec.stride;
  }
}

template <typename T>
Var<T> FeatureExtractor<T>::operator()(const Var<T>& x, bool training) {
  if (x.shape().size() != 4 || x.dim(1) != in_channels_) {
    throw ConfigError(kind_ + " expects N x " + std::to_string(in_channels_) +
                      " x H x W input, got " + shape_string(x.shape()));
  }
  Var<T> out = x;
  if (with_stem_) {
    out = relu(stem_bn_(stem_conv_(out), training));
    out = max_pool2d(out, 3, 2, 1);
  }
  for (auto& [name, blocks] : stages_) {
    for (auto& block : blocks) out = block(out, training);
  }
  return out;
}

template <typename T>
Shape FeatureExtractor<T>::output_shape(const Shape& input) const {
  const auto ceil_div = [this](std::size_t d) { return (d + stride_product_ - 1) / stride_product_; };
  return {input.at(0), out_channels_, ceil_div(input.at(2)), ceil_div(input.at(3))};
}

template <typename T>
void FeatureExtractor<T>::collect(const std::string& prefix, ParameterRegistry<T>& registry) {
  if (with_stem_) {
    stem_conv_.collect(prefix + "conv1.", registry);
    stem_bn_.collect(prefix + "bn1.", registry);
  }
  for (auto& [name, blocks] : stages_) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      blocks[b].collect(prefix + name + "." + std::to_string(b) + ".", registry);
    }
  }
}

template <typename T>
std::size_t FeatureExtractor<T>::tensor_count() {
  ParameterRegistry<T> registry;
  collect("", registry);
  return registry.parameters().size() + registry.buffers().size();
}

namespace {

template <typename T>
void copy_checked(const TensorTable& table, const std::string& key, Tensor<T>& dst) {
  const auto it = table.tensors.find(key);
  if (it == table.tensors.end()) throw LoadError("weight table is missing key '" + key + "'");
  const Tensor<double>& src = it->second;
  if (src.shape() != dst.shape()) {
    throw LoadError("shape mismatch for '" + key + "': model expects " +
                    shape_string(dst.shape()) + ", table has " + shape_string(src.shape()));
  }
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(src[i]);
}

}  // namespace

template <typename T>
std::size_t FeatureExtractor<T>::load_from(const TensorTable& table) {
  ParameterRegistry<T> registry;
  collect("", registry);
  // Validate everything before mutating so a failed load leaves the model intact.
  for (const auto& p : registry.parameters()) {
    Tensor<T> probe(p.var.shape());
    copy_checked(table, p.name, probe);
  }
  for (const auto& b : registry.buffers()) {
    Tensor<T> probe(b.tensor->shape());
    copy_checked(table, b.name, probe);
  }
  std::size_t copied = 0;
  for (const auto& p : registry.parameters()) {
    Var<T> var = p.var;
    copy_checked(table, p.name, var.mutable_value());
    ++copied;
  }
  for (const auto& b : registry.buffers()) {
    copy_checked(table, b.name, *b.tensor);
    ++copied;
  }
  return copied;
}

template <typename T>
std::shared_ptr<FeatureExtractor<T>> build_basic_network_i(const ModelConfig& config, Rng& rng) {
  if (config.input_channels != 3) {
    throw ConfigError("Basic Network I needs 3 input channels, got " +
                      std::to_string(config.input_channels));
  }
  using Spec = typename FeatureExtractor<T>::StageSpec;
  return std::make_shared<FeatureExtractor<T>>(
      "basic_network_i", true, config.input_channels,
      std::vector<Spec>{{"layer1", 64, 64, 1}, {"layer2", 64, 128, 2}, {"layer3", 128, 256, 2}},
      rng);
}

template <typename T>
std::shared_ptr<FeatureExtractor<T>> build_basic_network_ii(const ModelConfig&, Rng& rng) {
  using Spec = typename FeatureExtractor<T>::StageSpec;
  return std::make_shared<FeatureExtractor<T>>("basic_network_ii", false, 256,
                                               std::vector<Spec>{{"layer4", 256, 512, 2}}, rng);
}

template <typename T>
std::vector<std::pair<std::string, std::shared_ptr<FeatureExtractor<T>>>>
BranchSet<T>::distinct() const {
  if (!ub) return {{"sb", sb}};
  switch (policy) {
    case SharingPolicy::all_shared:
      return {{"branch", sb}};
    case SharingPolicy::halves_shared:
      return {{"sb", sb}, {"halves", ub}};
    case SharingPolicy::independent:
      return {{"sb", sb}, {"ub", ub}, {"lb", lb}};
  }
  return {};
}

template <typename T>
BranchSet<T> build_branches(const ModelConfig& config, bool with_halves, Rng& rng) {
  BranchSet<T> set;
  set.policy = config.sharing;
  set.sb = build_basic_network_i<T>(config, rng);
  if (!with_halves) return set;
  switch (config.sharing) {
    case SharingPolicy::all_shared:
      set.ub = set.lb = set.sb;
      break;
    case SharingPolicy::halves_shared:
      set.ub = build_basic_network_i<T>(config, rng);
      set.lb = set.ub;
      break;
    case SharingPolicy::independent:
      set.ub = build_basic_network_i<T>(config, rng);
      set.lb = build_basic_network_i<T>(config, rng);
      break;
  }
  return set;
}

template <typename T>
std::size_t load_pretrained(const TensorTable& weights, const BranchSet<T>& branches,
                            FeatureExtractor<T>* refine) {
  std::size_t copied = 0;
  for (const auto& [name, extractor] : branches.distinct()) copied += extractor->load_from(weights);
  if (refine) copied += refine->load_from(weights);
  return copied;
}

template class BasicBlock<float>;
template class BasicBlock<double>;
template class FeatureExtractor<float>;
template class FeatureExtractor<double>;
template struct BranchSet<float>;
template struct BranchSet<double>;
template std::shared_ptr<FeatureExtractor<float>> build_basic_network_i(const ModelConfig&, Rng&);
template std::shared_ptr<FeatureExtractor<double>> build_basic_network_i(const ModelConfig&, Rng&);
template std::shared_ptr<FeatureExtractor<float>> build_basic_network_ii(const ModelConfig&, Rng&);
template std::shared_ptr<FeatureExtractor<double>> build_basic_network_ii(const ModelConfig&,
                                                                          Rng&);
template BranchSet<float> build_branches(const ModelConfig&, bool, Rng&);
template BranchSet<double> build_branches(const ModelConfig&, bool, Rng&);
template std::size_t load_pretrained(const TensorTable&, const BranchSet<float>&,
                                     FeatureExtractor<float>*);
template std::size_t load_pretrained(const TensorTable&, const BranchSet<double>&,
                                     FeatureExtractor<double>*);

}  // namespace cmnet
