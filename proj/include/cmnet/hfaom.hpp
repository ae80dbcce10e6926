#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cmnet/autograd.hpp"

namespace cmnet {

using Labels = std::vector<std::size_t>;

// Loss decomposition for one batch: total = (1 - alpha) * l_sl + alpha * l_gl.
struct LossBundle {
  double l_sl = 0.0;
  double l_gl = 0.0;
  double total = 0.0;
  double alpha = 0.9;
};

// Global average pooling of both half-face maps: N x C x H x W -> N x C.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pooled_vectors(const Tensor<T>& f_left, const Tensor<T>& f_right);

// Elementwise two-way log-softmax over the (left, right) pair:
//   x_l = log(e^{v_l} / (e^{v_l} + e^{v_r})),  x_r likewise.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pairwise_log_softmax(const Tensor<T>& v_l, const Tensor<T>& v_r);

// L_sl = 2 / (N C) * sum_{i,j} (x_l - x_r)^2 over the pooled, log-softmaxed pair.
template <typename T>
T symmetry_loss(const Tensor<T>& f_left, const Tensor<T>& f_right);

// Batch-mean cross-entropy.
template <typename T>
T global_loss(const Tensor<T>& logits, const Labels& labels);

LossBundle total_loss(double l_sl, double l_gl, double alpha);

// Differentiable counterparts used by the training loop. Gradients reach both
// feature maps through the pooling and the pairwise normalisation.
template <typename T>
Var<T> symmetry_loss(const Var<T>& f_left, const Var<T>& f_right);
template <typename T>
Var<T> symmetry_loss_from_pooled(const Var<T>& v_l, const Var<T>& v_r);
template <typename T>
Var<T> global_loss(const Var<T>& logits, const Labels& labels);
// Convex combination; a term whose weight is exactly zero is left out of the
// graph entirely.
template <typename T>
Var<T> combine_losses(const Var<T>& l_sl, const Var<T>& l_gl, double alpha);

}  // namespace cmnet
