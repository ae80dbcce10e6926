#include "cmnet/cmem.hpp"

namespace cmnet {

Image mirror_horizontal(const Image& image) {
  Image out(image.height, image.width, image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
      }
    }
  }
  return out;
}

std::pair<Image, Image> split_face(const Image& image, bool mirror_right) {
  if (image.width < 2) {
    throw InputError("split_face: width must be at least 2, got " + std::to_string(image.width));
  }
  const std::size_t left_w = image.width / 2;
  const std::size_t right_w = image.width - left_w;
  Image left(image.height, left_w, image.channels);
  Image right(image.height, right_w, image.channels);
  const std::size_t c = image.channels;
  for (std::size_t y = 0; y < image.height; ++y) {
    const float* row = image.pixels.data() + y * image.width * c;
    std::copy(row, row + left_w * c, left.pixels.data() + y * left_w * c);
    std::copy(row + left_w * c, row + image.width * c, right.pixels.data() + y * right_w * c);
  }
  if (mirror_right) right = mirror_horizontal(right);
  return {std::move(left), std::move(right)};
}

FaceTriplet make_triplet(const Image& image, bool mirror_right) {
  auto [left, right] = split_face(image, mirror_right);
  return {image, std::move(left), std::move(right)};
}

Image concat_width(const Image& left, const Image& right) {
  if (left.height != right.height || left.channels != right.channels) {
    throw InputError("concat_width: halves differ in height or channels");
  }
  Image out(left.height, left.width + right.width, left.channels);
  const std::size_t c = left.channels;
  for (std::size_t y = 0; y < left.height; ++y) {
    float* dst = out.pixels.data() + y * out.width * c;
    std::copy_n(left.pixels.data() + y * left.width * c, left.width * c, dst);
    std::copy_n(right.pixels.data() + y * right.width * c, right.width * c, dst + left.width * c);
  }
  return out;
}

template <typename T>
Var<T> fuse_cross_modal(const Var<T>& structural, const Var<T>& f_left, const Var<T>& f_right) {
  const Shape& s = structural.shape();
  const Shape& l = f_left.shape();
  const Shape& r = f_right.shape();
  if (s.size() != 4 || l.size() != 4 || r.size() != 4) {
    throw FusionError("cross-modal fusion expects rank-4 feature maps");
  }
  if (l[0] != s[0] || r[0] != s[0] || l[1] != s[1] || r[1] != s[1] || l[2] != s[2] ||
      r[2] != s[2]) {
    throw FusionError("half-face maps " + shape_string(l) + " and " + shape_string(r) +
                      " do not match structural map " + shape_string(s));
  }
  if (l[3] + r[3] != s[3]) {
    throw FusionError("half-face feature widths " + std::to_string(l[3]) + " + " +
                      std::to_string(r[3]) + " do not sum to structural width " +
                      std::to_string(s[3]));
  }
  return add(structural, concat<T>({f_left, f_right}, 3));
}

template <typename T>
CmemOutput<T> cmem_forward(const Var<T>& whole, const Var<T>& left, const Var<T>& right,
                           const BranchSet<T>& branches, bool training) {
  CmemOutput<T> out;
  out.structural = (*branches.sb)(whole, training);
  out.f_left = (*branches.ub)(left, training);
  out.f_right = (*branches.lb)(right, training);
  out.fused = fuse_cross_modal(out.structural, out.f_left, out.f_right);
  return out;
}

template Var<float> fuse_cross_modal(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> fuse_cross_modal(const Var<double>&, const Var<double>&, const Var<double>&);
template CmemOutput<float> cmem_forward(const Var<float>&, const Var<float>&, const Var<float>&,
                                        const BranchSet<float>&, bool);
template CmemOutput<double> cmem_forward(const Var<double>&, const Var<double>&,
                                         const Var<double>&, const BranchSet<double>&, bool);

}  // namespace cmnet
