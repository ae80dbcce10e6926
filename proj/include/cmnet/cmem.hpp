#pragma once

#include <utility>

#include "cmnet/backbones.hpp"
#include "cmnet/image.hpp"

namespace cmnet {

// Whole face plus its two halves. left ++ right along the width reproduces
// whole when the right half is not mirrored.
struct FaceTriplet {
  Image whole;
  Image left;   // H x floor(W/2)
  Image right;  // H x ceil(W/2), optionally mirrored
};

// Columns [0, floor(W/2)) and [floor(W/2), W); an odd extra column goes right.
std::pair<Image, Image> split_face(const Image& image, bool mirror_right);
FaceTriplet make_triplet(const Image& image, bool mirror_right);
Image concat_width(const Image& left, const Image& right);
Image mirror_horizontal(const Image& image);

template <typename T>
struct CmemOutput {
  Var<T> structural;  // SB(whole)
  Var<T> f_left;      // UB(left)
  Var<T> f_right;     // LB(right)
  Var<T> fused;       // structural + concat_w(f_left, f_right)
};

// Residual fusion of the structural map with the width-concatenated half-face
// maps. Throws FusionError when the halves do not tile the structural map.
template <typename T>
Var<T> fuse_cross_modal(const Var<T>& structural, const Var<T>& f_left, const Var<T>& f_right);

template <typename T>
CmemOutput<T> cmem_forward(const Var<T>& whole, const Var<T>& left, const Var<T>& right,
                           const BranchSet<T>& branches, bool training);

}  // namespace cmnet
