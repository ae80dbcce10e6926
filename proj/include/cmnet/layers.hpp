#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmnet/ops.hpp"
#include "cmnet/rng.hpp"

namespace cmnet {

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// Flat, ordered view of the trainable parameters and persistent buffers of a
// module tree. Names are dotted paths.
template <typename T>
class ParameterRegistry {
 public:
  void add_parameter(std::string name, const Var<T>& var) {
    parameters_.push_back({std::move(name), var});
  }
  void add_buffer(std::string name, Tensor<T>* tensor) {
    buffers_.push_back({std::move(name), tensor});
  }
  // By value on temporaries so `for (auto& p : model.registry().parameters())` is safe.
  const std::vector<NamedParameter<T>>& parameters() const& noexcept { return parameters_; }
  std::vector<NamedParameter<T>> parameters() && { return std::move(parameters_); }
  const std::vector<NamedBuffer<T>>& buffers() const& noexcept { return buffers_; }
  std::vector<NamedBuffer<T>> buffers() && { return std::move(buffers_); }
  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters_) total += p.var.value().numel();
    return total;
  }

 private:
  std::vector<NamedParameter<T>> parameters_;
  std::vector<NamedBuffer<T>> buffers_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, bool with_bias, Rng& rng)
      : geometry_{stride, padding} {
    const double fan_in = static_cast<double>(in_channels * kernel * kernel);
    // He-uniform: keeps activation variance through ReLU stacks.
    weight_ = Var<T>::parameter(uniform_tensor<T>({out_channels, in_channels, kernel, kernel},
                                                  std::sqrt(6.0 / fan_in), rng));
    if (with_bias) {
      bias_ = Var<T>::parameter(uniform_tensor<T>({out_channels}, 1.0 / std::sqrt(fan_in), rng));
    }
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_, geometry_); }

  void collect(const std::string& prefix, ParameterRegistry<T>& registry) const {
    registry.add_parameter(prefix + "weight", weight_);
    if (bias_.defined()) registry.add_parameter(prefix + "bias", bias_);
  }

  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  std::size_t kernel() const { return weight_.dim(2); }
  const ConvGeometry& geometry() const noexcept { return geometry_; }
  Var<T>& weight() noexcept { return weight_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
  ConvGeometry geometry_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma_(Var<T>::parameter(Tensor<T>({channels}, T{1}))),
        beta_(Var<T>::parameter(Tensor<T>({channels}, T{0}))),
        running_mean_({channels}, T{0}),
        running_var_({channels}, T{1}) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training, kMomentum,
                        kEps);
  }

  void collect(const std::string& prefix, ParameterRegistry<T>& registry) {
    registry.add_parameter(prefix + "weight", gamma_);
    registry.add_parameter(prefix + "bias", beta_);
    registry.add_buffer(prefix + "running_mean", &running_mean_);
    registry.add_buffer(prefix + "running_var", &running_var_);
  }

  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

 private:
  Var<T> gamma_;
  Var<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, bool with_bias, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    weight_ = Var<T>::parameter(uniform_tensor<T>({out_features, in_features}, bound, rng));
    if (with_bias) bias_ = Var<T>::parameter(uniform_tensor<T>({out_features}, bound, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight_, bias_); }

  void collect(const std::string& prefix, ParameterRegistry<T>& registry) const {
    registry.add_parameter(prefix + "weight", weight_);
    if (bias_.defined()) registry.add_parameter(prefix + "bias", bias_);
  }

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  Var<T>& weight() noexcept { return weight_; }
  Var<T>& bias() noexcept { return bias_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
};

}  // namespace cmnet
