#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cmnet/autograd.hpp"

namespace cmnet {

// Accumulates conv/affine FLOPs (2 x multiply-accumulates) in the current
// thread while a FlopScope is alive.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
  std::uint64_t flops() const noexcept { return flops_; }
  void add(std::uint64_t f) noexcept { flops_ += f; }

 private:
  FlopScope* previous_;
  std::uint64_t flops_ = 0;
};

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// x: N x Cin x H x W, weight: Cout x Cin x Kh x Kw, bias: Cout or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geometry);

// Per-channel batch normalisation over (N, H, W). In training mode batch
// statistics are used and the running estimates are updated in place.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                    double momentum, double eps);

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);

// x: N x C x H x W times gate N x C (broadcast over H x W).
template <typename T>
Var<T> mul_channel_gate(const Var<T>& x, const Var<T>& gate);
// x: N x C x H x W times gate N x 1 x H x W (broadcast over C).
template <typename T>
Var<T> mul_spatial_gate(const Var<T>& x, const Var<T>& gate);

// N x C x H x W -> N x C
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> global_max_pool(const Var<T>& x);

// N x C x H x W -> N x 1 x H x W
template <typename T>
Var<T> channel_mean(const Var<T>& x);
template <typename T>
Var<T> channel_max(const Var<T>& x);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

// x: N x in, weight: out x in, bias: out or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> sum(const Var<T>& x);

// Plain tensor helpers shared by the differentiable ops.
template <typename T>
Tensor<T> concat_tensors(const std::vector<const Tensor<T>*>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice_tensor(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

}  // namespace cmnet
