#include "cmnet/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace cmnet {

namespace {

thread_local FlopScope* active_flop_scope = nullptr;

void count_flops(std::uint64_t flops) {
  if (active_flop_scope) active_flop_scope->add(flops);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw ShapeError(std::string(what) + ": expected N x C x H x W, got " + shape_string(s));
  }
}

struct ConvDims {
  std::size_t n, c, h, w, kh, kw, oh, ow, stride, pad;
};

// Output columns [lo, hi) whose input column ow * stride + k - pad is inside [0, extent).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent,
                       std::size_t out) {
  const std::size_t lo = k >= pad ? 0 : std::min(out, (pad - k + stride - 1) / stride);
  const std::size_t reach = extent + pad;  // first out-of-range padded index
  const std::size_t hi = k >= reach ? 0 : std::min(out, (reach - k - 1) / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::size_t plane = d.oh * d.ow;
  const std::size_t cols = d.n * plane;
  const bool same = d.stride == 1 && d.oh == d.h && d.ow == d.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      const ValidRange rows = valid_range(kh, d.pad, d.stride, d.h, d.oh);
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        const ValidRange span = valid_range(kw, d.pad, d.stride, d.w, d.ow);
        T* row = col + ((c * d.kh + kh) * d.kw + kw) * cols;
        if (same) {
          // The tap is a plane shifted by `offset`; copy it in one run, then
          // clear the columns that wrapped across a row edge.
          const std::ptrdiff_t offset =
              (static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.pad)) *
                  static_cast<std::ptrdiff_t>(d.w) +
              static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pad);
          const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(plane);
          // clamped: on tiny maps a far tap can miss the plane entirely
          const std::ptrdiff_t i0 = std::clamp<std::ptrdiff_t>(-offset, 0, total);
          const std::ptrdiff_t i1 = std::clamp<std::ptrdiff_t>(total - offset, i0, total);
          for (std::size_t n = 0; n < d.n; ++n) {
            const T* src = x + (n * d.c + c) * plane;
            T* dst = row + n * plane;
            std::fill(dst, dst + i0, T{0});
            std::copy(src + i0 + offset, src + i1 + offset, dst + i0);
            std::fill(dst + i1, dst + total, T{0});
            if (span.lo > 0 || span.hi < d.ow) {
              for (std::size_t oh = 0; oh < d.oh; ++oh) {
                T* out = dst + oh * d.ow;
                std::fill(out, out + span.lo, T{0});
                std::fill(out + span.hi, out + d.ow, T{0});
              }
            }
          }
          continue;
        }
        for (std::size_t n = 0; n < d.n; ++n) {
          const T* src = x + (n * d.c + c) * d.h * d.w;
          T* dst = row + n * plane;
          std::fill(dst, dst + rows.lo * d.ow, T{0});
          std::fill(dst + rows.hi * d.ow, dst + plane, T{0});
          for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
            const T* src_row = src + (oh * d.stride + kh - d.pad) * d.w;
            T* out = dst + oh * d.ow;
            std::fill(out, out + span.lo, T{0});
            std::fill(out + span.hi, out + d.ow, T{0});
            const T* in = src_row + span.lo * d.stride + kw - d.pad;
            if (d.stride == 1) {
              std::copy(in, in + (span.hi - span.lo), out + span.lo);
            } else {
              for (std::size_t ow = span.lo; ow < span.hi; ++ow, in += d.stride) out[ow] = *in;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvDims& d, T* dx) {
  const std::size_t plane = d.oh * d.ow;
  const std::size_t cols = d.n * plane;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      const ValidRange rows = valid_range(kh, d.pad, d.stride, d.h, d.oh);
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        const ValidRange span = valid_range(kw, d.pad, d.stride, d.w, d.ow);
        const T* row = col + ((c * d.kh + kh) * d.kw + kw) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          T* dst = dx + (n * d.c + c) * d.h * d.w;
          const T* src = row + n * plane;
          for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
            T* out = dst + (oh * d.stride + kh - d.pad) * d.w + span.lo * d.stride + kw - d.pad;
            const T* in = src + oh * d.ow;
            if (d.stride == 1) {
              for (std::size_t ow = span.lo; ow < span.hi; ++ow) out[ow - span.lo] += in[ow];
            } else {
              for (std::size_t ow = span.lo; ow < span.hi; ++ow, out += d.stride) *out += in[ow];
            }
          }
        }
      }
    }
  }
}

// Max selection that lets a NaN win and then keeps it; ties keep the earlier entry.
template <typename T>
bool beats(T candidate, T best) {
  return !std::isnan(best) && !(candidate <= best);
}

// [outer, axis, inner] view of a tensor around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

FlopScope::FlopScope() : previous_(active_flop_scope) { active_flop_scope = this; }
FlopScope::~FlopScope() {
  active_flop_scope = previous_;
  if (previous_) previous_->add(flops_);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geometry) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require_rank4(xs, "conv2d input");
  require_rank4(ws, "conv2d weight");
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (xs[2] + 2 * geometry.padding < ws[2] || xs[3] + 2 * geometry.padding < ws[3]) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_string(xs));
  }
  ConvDims d{xs[0],
             xs[1],
             xs[2],
             xs[3],
             ws[2],
             ws[3],
             conv_output_size(xs[2], ws[2], geometry.stride, geometry.padding),
             conv_output_size(xs[3], ws[3], geometry.stride, geometry.padding),
             geometry.stride,
             geometry.padding};
  const std::size_t cout = ws[0];
  const std::size_t rows = d.c * d.kh * d.kw;
  const std::size_t plane = d.oh * d.ow;
  const std::size_t cols = d.n * plane;

  // im2col writes every element, so skip the zero fill
  std::unique_ptr<T[]> col(new T[rows * cols]);
  im2col(x.value().data(), d, col.get());
  RowMat<T> y = ConstMatMap<T>(weight.value().data(), cout, rows) *
                ConstMatMap<T>(col.get(), rows, cols);
  Tensor<T> out({d.n, cout, d.oh, d.ow});
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      const T b = bias.defined() ? bias.value()[co] : T{0};
      const T* src = y.data() + co * cols + n * plane;
      T* dst = out.data() + (n * cout + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }
  count_flops(2ull * rows * cout * cols);

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [d, cout, rows, plane, cols](Node<T>& self) {
    const bool has_bias = self.parents.size() == 3;
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    RowMat<T> dy(cout, cols);
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t co = 0; co < cout; ++co) {
        const T* src = self.grad.data() + (n * cout + co) * plane;
        std::copy(src, src + plane, dy.data() + co * cols + n * plane);
      }
    }
    if (wn.requires_grad) {
      std::unique_ptr<T[]> col(new T[rows * cols]);
      im2col(xn.value.data(), d, col.get());
      MatMap<T> dw(wn.grad_buffer().data(), cout, rows);
      dw.noalias() += dy * ConstMatMap<T>(col.get(), rows, cols).transpose();
    }
    if (has_bias && self.parents[2]->requires_grad) {
      Tensor<T>& db = self.parents[2]->grad_buffer();
      for (std::size_t co = 0; co < cout; ++co) db[co] += dy.row(co).sum();
    }
    if (xn.requires_grad) {
      RowMat<T> dcol = ConstMatMap<T>(wn.value.data(), cout, rows).transpose() * dy;
      col2im(dcol.data(), d, xn.grad_buffer().data());
    }
  });
}

template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                    double momentum, double eps) {
  const Shape& s = x.shape();
  require_rank4(s, "batch_norm2d");
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("batch_norm2d: affine parameters do not match " + std::to_string(c) +
                     " channels");
  }
  const std::size_t count = n * plane;
  const T* xv = x.value().data();
  Tensor<T> xhat(s);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    if (training) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv + (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) mean += p[k];
      }
      mean /= static_cast<double>(count);
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv + (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const double dv = p[k] - mean;
          var += dv * dv;
        }
      }
      const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : 0.0;
      var /= static_cast<double>(count);
      running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * mean);
      running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * unbiased);
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = static_cast<T>(istd);
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = xv + (i * c + ch) * plane;
      T* q = xhat.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) q[k] = static_cast<T>((p[k] - mean) * istd);
    }
  }
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = gamma.value()[ch], b = beta.value()[ch];
      const T* q = xhat.data() + (i * c + ch) * plane;
      T* o = out.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) o[k] = g * q[k] + b;
    }
  }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, count,
       training](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& gn = *self.parents[1];
        Node<T>& bn = *self.parents[2];
        const T* g = self.grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
              sum_dy += g[base + k];
              sum_dy_xhat += static_cast<double>(g[base + k]) * xhat[base + k];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[ch] += static_cast<T>(sum_dy_xhat);
          if (bn.requires_grad) bn.grad_buffer()[ch] += static_cast<T>(sum_dy);
          if (!xn.requires_grad) continue;
          T* dx = xn.grad_buffer().data();
          const double gamma_v = gn.value[ch];
          const double scale = gamma_v * inv_std[ch];
          if (training) {
            const double mean_dy = sum_dy / static_cast<double>(count);
            const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t base = (i * c + ch) * plane;
              for (std::size_t k = 0; k < plane; ++k) {
                dx[base + k] += static_cast<T>(
                    scale * (g[base + k] - mean_dy - xhat[base + k] * mean_dy_xhat));
              }
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t base = (i * c + ch) * plane;
              for (std::size_t k = 0; k < plane; ++k) {
                dx[base + k] += static_cast<T>(scale * g[base + k]);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const Shape& s = x.shape();
  require_rank4(s, "max_pool2d");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t oh = conv_output_size(h, kernel, stride, padding);
  const std::size_t ow = conv_output_size(w, kernel, stride, padding);
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::uint32_t> argmax(out.numel());
  const T* xv = x.value().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xv + plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_idx = 0;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * stride + ki) -
                                    static_cast<std::ptrdiff_t>(padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * stride + kj) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
            if (beats(src[idx], best)) {
              best = src[idx];
              best_idx = static_cast<std::uint32_t>(idx);
            }
          }
        }
        out[(plane * oh + i) * ow + j] = best;
        argmax[(plane * oh + i) * ow + j] = best_idx;
      }
    }
  }
  return make_result<T>(std::move(out), {x},
                        [argmax = std::move(argmax), plane_in = h * w, plane_out = oh * ow,
                         planes = n * c](Node<T>& self) {
                          T* dx = self.parents[0]->grad_buffer().data();
                          for (std::size_t p = 0; p < planes; ++p) {
                            for (std::size_t k = 0; k < plane_out; ++k) {
                              dx[p * plane_in + argmax[p * plane_out + k]] +=
                                  self.grad[p * plane_out + k];
                            }
                          }
                        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  // NaN passes through so bad inputs surface in the loss
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] < T{0} ? T{0} : xv[i];
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    T* dx = xn.grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      if (xn.value[i] > T{0}) dx[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = xv[i];
    // split by sign so exp never overflows
    out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
  }
  Tensor<T> saved = out;
  return make_result<T>(std::move(out), {x}, [saved = std::move(saved)](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < saved.numel(); ++i) {
      dx[i] += self.grad[i] * saved[i] * (T{1} - saved[i]);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& an = *self.parents[0];
    Node<T>& bn = *self.parents[1];
    if (an.requires_grad) {
      T* da = an.grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) da[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      T* db = bn.grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) db[i] += self.grad[i] * an.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    T* da = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) da[i] += self.grad[i] * factor;
  });
}

template <typename T>
Var<T> mul_channel_gate(const Var<T>& x, const Var<T>& gate) {
  const Shape& s = x.shape();
  require_rank4(s, "mul_channel_gate");
  if (gate.shape() != Shape{s[0], s[1]}) {
    throw ShapeError("mul_channel_gate: gate " + shape_string(gate.shape()) +
                     " does not match " + shape_string(s));
  }
  const std::size_t nc = s[0] * s[1], plane = s[2] * s[3];
  Tensor<T> out(s);
  for (std::size_t i = 0; i < nc; ++i) {
    const T g = gate.value()[i];
    for (std::size_t k = 0; k < plane; ++k) out[i * plane + k] = x.value()[i * plane + k] * g;
  }
  return make_result<T>(std::move(out), {x, gate}, [nc, plane](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& gn = *self.parents[1];
    for (std::size_t i = 0; i < nc; ++i) {
      if (xn.requires_grad) {
        T* dx = xn.grad_buffer().data() + i * plane;
        const T g = gn.value[i];
        for (std::size_t k = 0; k < plane; ++k) dx[k] += self.grad[i * plane + k] * g;
      }
      if (gn.requires_grad) {
        double acc = 0.0;
        for (std::size_t k = 0; k < plane; ++k) {
          acc += static_cast<double>(self.grad[i * plane + k]) * xn.value[i * plane + k];
        }
        gn.grad_buffer()[i] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var<T> mul_spatial_gate(const Var<T>& x, const Var<T>& gate) {
  const Shape& s = x.shape();
  require_rank4(s, "mul_spatial_gate");
  if (gate.shape() != Shape{s[0], 1, s[2], s[3]}) {
    throw ShapeError("mul_spatial_gate: gate " + shape_string(gate.shape()) +
                     " does not match " + shape_string(s));
  }
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    const T* g = gate.value().data() + i * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) out[base + k] = x.value()[base + k] * g[k];
    }
  }
  return make_result<T>(std::move(out), {x, gate}, [n, c, plane](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& gn = *self.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = gn.value.data() + i * plane;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * plane;
        if (xn.requires_grad) {
          T* dx = xn.grad_buffer().data() + base;
          for (std::size_t k = 0; k < plane; ++k) dx[k] += self.grad[base + k] * g[k];
        }
        if (gn.requires_grad) {
          T* dg = gn.grad_buffer().data() + i * plane;
          for (std::size_t k = 0; k < plane; ++k) dg[k] += self.grad[base + k] * xn.value[base + k];
        }
      }
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  require_rank4(s, "global_avg_pool");
  const std::size_t nc = s[0] * s[1], plane = s[2] * s[3];
  Tensor<T> out({s[0], s[1]});
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < plane; ++k) acc += x.value()[i * plane + k];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return make_result<T>(std::move(out), {x}, [nc, plane](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().data();
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t i = 0; i < nc; ++i) {
      const T g = self.grad[i] * inv;
      for (std::size_t k = 0; k < plane; ++k) dx[i * plane + k] += g;
    }
  });
}

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  require_rank4(s, "global_max_pool");
  const std::size_t nc = s[0] * s[1], plane = s[2] * s[3];
  Tensor<T> out({s[0], s[1]});
  std::vector<std::size_t> argmax(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < plane; ++k) {
      if (beats(x.value()[i * plane + k], x.value()[i * plane + best])) best = k;
    }
    argmax[i] = best;
    out[i] = x.value()[i * plane + best];
  }
  return make_result<T>(std::move(out), {x},
                        [argmax = std::move(argmax), plane](Node<T>& self) {
                          T* dx = self.parents[0]->grad_buffer().data();
                          for (std::size_t i = 0; i < argmax.size(); ++i) {
                            dx[i * plane + argmax[i]] += self.grad[i];
                          }
                        });
}

template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  const Shape& s = x.shape();
  require_rank4(s, "channel_mean");
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor<T> out({n, 1, s[2], s[3]});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < plane; ++k) {
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += x.value()[(i * c + ch) * plane + k];
      out[i * plane + k] = static_cast<T>(acc / static_cast<double>(c));
    }
  }
  return make_result<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().data();
    const T inv = T{1} / static_cast<T>(c);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t k = 0; k < plane; ++k) {
          dx[(i * c + ch) * plane + k] += self.grad[i * plane + k] * inv;
        }
      }
    }
  });
}

template <typename T>
Var<T> channel_max(const Var<T>& x) {
  const Shape& s = x.shape();
  require_rank4(s, "channel_max");
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor<T> out({n, 1, s[2], s[3]});
  std::vector<std::size_t> argmax(n * plane);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < plane; ++k) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch) {
        if (beats(x.value()[(i * c + ch) * plane + k], x.value()[(i * c + best) * plane + k]))
          best = ch;
      }
      argmax[i * plane + k] = best;
      out[i * plane + k] = x.value()[(i * c + best) * plane + k];
    }
  }
  return make_result<T>(std::move(out), {x},
                        [argmax = std::move(argmax), n, c, plane](Node<T>& self) {
                          T* dx = self.parents[0]->grad_buffer().data();
                          for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t k = 0; k < plane; ++k) {
                              dx[(i * c + argmax[i * plane + k]) * plane + k] +=
                                  self.grad[i * plane + k];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_tensors(const std::vector<const Tensor<T>*>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts.front()->shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const Tensor<T>* p : parts) {
    const Shape& s = p->shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != parts.front()->shape()[i]) {
        throw ShapeError("concat: incompatible shapes " + shape_string(parts.front()->shape()) +
                         " and " + shape_string(s) + " along axis " + std::to_string(axis));
      }
    }
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape);
  const AxisView ov = axis_view(out_shape, axis);
  std::size_t offset = 0;
  for (const Tensor<T>* p : parts) {
    const AxisView pv = axis_view(p->shape(), axis);
    const std::size_t block = pv.extent * pv.inner;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy(p->data() + o * block, p->data() + (o + 1) * block,
                out.data() + o * ov.extent * ov.inner + offset * ov.inner);
    }
    offset += pv.extent;
  }
  return out;
}

template <typename T>
Tensor<T> slice_tensor(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw ShapeError("slice: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") on axis " + std::to_string(axis) + " of " +
                     shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const AxisView v = axis_view(x.shape(), axis);
  const std::size_t len = (end - begin) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* src = x.data() + o * v.extent * v.inner + begin * v.inner;
    std::copy(src, src + len, out.data() + o * len);
  }
  return out;
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  std::vector<const Tensor<T>*> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(&p.value());
  Tensor<T> out = concat_tensors(values, axis);
  return make_result<T>(std::move(out), parts, [axis](Node<T>& self) {
    const AxisView ov = axis_view(self.value.shape(), axis);
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const AxisView pv = axis_view(p->value.shape(), axis);
      if (p->requires_grad) {
        T* dp = p->grad_buffer().data();
        const std::size_t block = pv.extent * pv.inner;
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const T* src = self.grad.data() + o * ov.extent * ov.inner + offset * ov.inner;
          for (std::size_t k = 0; k < block; ++k) dp[o * block + k] += src[k];
        }
      }
      offset += pv.extent;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  Tensor<T> out = slice_tensor(x.value(), axis, begin, end);
  return make_result<T>(std::move(out), {x}, [axis, begin, end](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    const AxisView v = axis_view(xn.value.shape(), axis);
    const std::size_t len = (end - begin) * v.inner;
    T* dx = xn.grad_buffer().data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      T* dst = dx + o * v.extent * v.inner + begin * v.inner;
      for (std::size_t k = 0; k < len; ++k) dst[k] += self.grad[o * len + k];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) {
    throw ShapeError("linear: input " + shape_string(xs) + " incompatible with weight " +
                     shape_string(ws));
  }
  const std::size_t n = xs[0], in = xs[1], outd = ws[0];
  RowMat<T> y = ConstMatMap<T>(x.value().data(), n, in) *
                ConstMatMap<T>(weight.value().data(), outd, in).transpose();
  Tensor<T> out({n, outd});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < outd; ++j) {
      out[i * outd + j] = y(i, j) + (bias.defined() ? bias.value()[j] : T{0});
    }
  }
  count_flops(2ull * n * in * outd);
  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [n, in, outd](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    ConstMatMap<T> dy(self.grad.data(), n, outd);
    if (xn.requires_grad) {
      MatMap<T>(xn.grad_buffer().data(), n, in).noalias() +=
          dy * ConstMatMap<T>(wn.value.data(), outd, in);
    }
    if (wn.requires_grad) {
      MatMap<T>(wn.grad_buffer().data(), outd, in).noalias() +=
          dy.transpose() * ConstMatMap<T>(xn.value.data(), n, in);
    }
    if (self.parents.size() == 3 && self.parents[2]->requires_grad) {
      Tensor<T>& db = self.parents[2]->grad_buffer();
      for (std::size_t j = 0; j < outd; ++j) db[j] += dy.col(j).sum();
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {x}, [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    T* dx = xn.grad_buffer().data();
    for (std::size_t i = 0; i < xn.value.numel(); ++i) dx[i] += self.grad[0];
  });
}

#define CMNET_INSTANTIATE_OPS(T)                                                              \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, ConvGeometry);         \
  template Var<T> batch_norm2d(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&,      \
                               Tensor<T>&, bool, double, double);                            \
  template Var<T> max_pool2d(const Var<T>&, std::size_t, std::size_t, std::size_t);          \
  template Var<T> relu(const Var<T>&);                                                        \
  template Var<T> sigmoid(const Var<T>&);                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
  template Var<T> scale(const Var<T>&, T);                                                    \
  template Var<T> mul_channel_gate(const Var<T>&, const Var<T>&);                             \
  template Var<T> mul_spatial_gate(const Var<T>&, const Var<T>&);                             \
  template Var<T> global_avg_pool(const Var<T>&);                                             \
  template Var<T> global_max_pool(const Var<T>&);                                             \
  template Var<T> channel_mean(const Var<T>&);                                                \
  template Var<T> channel_max(const Var<T>&);                                                 \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                            \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> sum(const Var<T>&);                                                         \
  template Tensor<T> concat_tensors(const std::vector<const Tensor<T>*>&, std::size_t);       \
  template Tensor<T> slice_tensor(const Tensor<T>&, std::size_t, std::size_t, std::size_t);

CMNET_INSTANTIATE_OPS(float)
CMNET_INSTANTIATE_OPS(double)

}  // namespace cmnet
