#include "cmnet/hfaom.hpp"

#include <cmath>
#include <string>

#include "cmnet/errors.hpp"
#include "cmnet/ops.hpp"

namespace cmnet {

namespace {

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) throw InputError(std::string(what) + ": non-finite input");
  }
}

template <typename T>
void check_pair(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw InputError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

// Stable log(e^a / (e^a + e^b)).
template <typename T>
T log_pair(T a, T b) {
  const T m = std::max(a, b);
  return a - (m + std::log(std::exp(a - m) + std::exp(b - m)));
}

}  // namespace

template <typename T>
std::pair<Tensor<T>, Tensor<T>> pooled_vectors(const Tensor<T>& f_left, const Tensor<T>& f_right) {
  check_pair<T>(f_left.shape(), f_right.shape(), "pooled_vectors");
  if (f_left.rank() != 4) throw InputError("pooled_vectors expects N x C x H x W maps");
  NoGradGuard guard;
  return {global_avg_pool(Var<T>(f_left)).value(), global_avg_pool(Var<T>(f_right)).value()};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> pairwise_log_softmax(const Tensor<T>& v_l, const Tensor<T>& v_r) {
  check_pair<T>(v_l.shape(), v_r.shape(), "pairwise_log_softmax");
  require_finite(v_l, "pairwise_log_softmax");
  require_finite(v_r, "pairwise_log_softmax");
  Tensor<T> x_l(v_l.shape()), x_r(v_r.shape());
  for (std::size_t i = 0; i < v_l.numel(); ++i) {
    x_l[i] = log_pair(v_l[i], v_r[i]);
    x_r[i] = log_pair(v_r[i], v_l[i]);
  }
  return {std::move(x_l), std::move(x_r)};
}

template <typename T>
T symmetry_loss(const Tensor<T>& f_left, const Tensor<T>& f_right) {
  NoGradGuard guard;
  return symmetry_loss(Var<T>(f_left), Var<T>(f_right)).value()[0];
}

template <typename T>
T global_loss(const Tensor<T>& logits, const Labels& labels) {
  NoGradGuard guard;
  return global_loss(Var<T>(logits), labels).value()[0];
}

LossBundle total_loss(double l_sl, double l_gl, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  return {l_sl, l_gl, (1.0 - alpha) * l_sl + alpha * l_gl, alpha};
}

template <typename T>
Var<T> symmetry_loss_from_pooled(const Var<T>& v_l, const Var<T>& v_r) {
  check_pair<T>(v_l.shape(), v_r.shape(), "symmetry_loss");
  if (v_l.shape().size() != 2 || v_l.dim(0) == 0 || v_l.dim(1) == 0) {
    throw InputError("symmetry_loss expects non-empty N x C pooled vectors");
  }
  auto [x_l, x_r] = pairwise_log_softmax(v_l.value(), v_r.value());
  const std::size_t count = v_l.value().numel();
  const double norm = 2.0 / static_cast<double>(count);
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(x_l[i]) - static_cast<double>(x_r[i]);
    acc += d * d;
  }
  Tensor<T> out({1}, static_cast<T>(norm * acc));
  return make_result<T>(
      std::move(out), {v_l, v_r},
      [x_l = std::move(x_l), x_r = std::move(x_r), norm](Node<T>& self) {
        Node<T>& ln = *self.parents[0];
        Node<T>& rn = *self.parents[1];
        const double upstream = self.grad[0];
        for (std::size_t i = 0; i < x_l.numel(); ++i) {
          // dL/dx_l = -dL/dx_r = 2 * norm * (x_l - x_r); then through the
          // log-softmax Jacobian with p = exp(x).
          const double g_l = upstream * 2.0 * norm * (x_l[i] - x_r[i]);
          const double g_r = -g_l;
          const double p_l = std::exp(static_cast<double>(x_l[i]));
          const double p_r = std::exp(static_cast<double>(x_r[i]));
          if (ln.requires_grad) {
            ln.grad_buffer()[i] += static_cast<T>(g_l * (1.0 - p_l) - g_r * p_l);
          }
          if (rn.requires_grad) {
            rn.grad_buffer()[i] += static_cast<T>(g_r * (1.0 - p_r) - g_l * p_r);
          }
        }
      });
}

template <typename T>
Var<T> symmetry_loss(const Var<T>& f_left, const Var<T>& f_right) {
  check_pair<T>(f_left.shape(), f_right.shape(), "symmetry_loss");
  if (f_left.shape().size() != 4) throw InputError("symmetry_loss expects N x C x H x W maps");
  return symmetry_loss_from_pooled(global_avg_pool(f_left), global_avg_pool(f_right));
}

template <typename T>
Var<T> global_loss(const Var<T>& logits, const Labels& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
    throw InputError("global_loss: logits " + shape_string(s) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s[0], k = s[1];
  for (std::size_t label : labels) {
    if (label >= k) {
      throw InputError("global_loss: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(k) + ")");
    }
  }
  Tensor<T> probs(s);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.value().data() + i * k;
    const T m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - m));
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<T>(std::exp(row[j] - lse));
    acc += lse - row[labels[i]];
  }
  Tensor<T> out({1}, static_cast<T>(acc / static_cast<double>(n)));
  return make_result<T>(std::move(out), {logits},
                        [probs = std::move(probs), labels, n, k](Node<T>& self) {
                          T* d = self.parents[0]->grad_buffer().data();
                          const T scale = self.grad[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const T target = j == labels[i] ? T{1} : T{0};
                              d[i * k + j] += scale * (probs[i * k + j] - target);
                            }
                          }
                        });
}

template <typename T>
Var<T> combine_losses(const Var<T>& l_sl, const Var<T>& l_gl, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  const T w_sl = static_cast<T>(1.0 - alpha);
  const T w_gl = static_cast<T>(alpha);
  if (!l_sl.defined() || w_sl == T{0}) return scale(l_gl, w_gl);
  if (w_gl == T{0}) return scale(l_sl, w_sl);
  return add(scale(l_sl, w_sl), scale(l_gl, w_gl));
}

#define CMNET_INSTANTIATE_HFAOM(T)                                                          \
  template std::pair<Tensor<T>, Tensor<T>> pooled_vectors(const Tensor<T>&, const Tensor<T>&); \
  template std::pair<Tensor<T>, Tensor<T>> pairwise_log_softmax(const Tensor<T>&,            \
                                                                const Tensor<T>&);           \
  template T symmetry_loss(const Tensor<T>&, const Tensor<T>&);                              \
  template T global_loss(const Tensor<T>&, const Labels&);                                   \
  template Var<T> symmetry_loss(const Var<T>&, const Var<T>&);                               \
  template Var<T> symmetry_loss_from_pooled(const Var<T>&, const Var<T>&);                   \
  template Var<T> global_loss(const Var<T>&, const Labels&);                                 \
  template Var<T> combine_losses(const Var<T>&, const Var<T>&, double);

CMNET_INSTANTIATE_HFAOM(float)
CMNET_INSTANTIATE_HFAOM(double)

}  // namespace cmnet
