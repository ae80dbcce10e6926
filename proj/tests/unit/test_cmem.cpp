#include "doctest.h"

#include "cmnet/cmem.hpp"
#include "cmnet/data.hpp"
#include "cmnet/errors.hpp"
#include "cmnet/model_config.hpp"
#include "gradcheck.hpp"

using namespace cmnet;
using cmnet::testing::check_op;
using cmnet::testing::random_tensor;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, 3);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return img;
}

Image symmetric_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Image img = random_image(h, w, seed);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = w / 2; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = img.at(y, w - 1 - x, c);
  return img;
}

}  // namespace

TEST_CASE("split_face uses a floor split with the odd column on the right") {
  const auto [l224, r224] = split_face(random_image(224, 224, 1), false);
  CHECK(l224.width == 112);
  CHECK(r224.width == 112);
  CHECK(l224.height == 224);
  const auto [l225, r225] = split_face(random_image(224, 225, 1), false);
  CHECK(l225.width == 112);
  CHECK(r225.width == 113);
  CHECK_THROWS_AS(split_face(random_image(4, 1, 1), false), InputError);
}

TEST_CASE("unmirrored halves concatenate back to the whole face") {
  for (std::size_t w : {2, 7, 64, 225}) {
    const Image img = random_image(5, w, w);
    const auto [left, right] = split_face(img, false);
    CHECK(concat_width(left, right) == img);
    const FaceTriplet t = make_triplet(img, false);
    CHECK(t.whole == img);
    CHECK(t.left == left);
  }
}

TEST_CASE("a mirror-symmetric face yields equal halves when the right one is flipped") {
  const auto [left, right] = split_face(symmetric_image(16, 24, 2), true);
  CHECK(left == right);
  const auto [l2, r2] = split_face(symmetric_image(16, 24, 2), false);
  CHECK(mirror_horizontal(r2) == l2);
}

TEST_CASE("fusion is exact elementwise addition of SB and the concatenated halves") {
  Rng rng(3);
  const auto s = random_tensor({2, 4, 6, 6}, rng);
  const auto l = random_tensor({2, 4, 6, 3}, rng);
  const auto r = random_tensor({2, 4, 6, 3}, rng);
  NoGradGuard guard;
  const auto fused = fuse_cross_modal(Var<double>(s), Var<double>(l), Var<double>(r)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t h = 0; h < 6; ++h)
        for (std::size_t w = 0; w < 6; ++w) {
          const double half = w < 3 ? l.at(n, c, h, w) : r.at(n, c, h, w - 3);
          REQUIRE(fused.at(n, c, h, w) == s.at(n, c, h, w) + half);
        }

  const auto sf = s.cast<float>(), lf = l.cast<float>(), rf = r.cast<float>();
  const auto fused_f = fuse_cross_modal(Var<float>(sf), Var<float>(lf), Var<float>(rf)).value();
  const auto con = concat<float>({Var<float>(lf), Var<float>(rf)}, 3).value();
  float worst = 0.0f;
  for (std::size_t i = 0; i < fused_f.numel(); ++i)
    worst = std::max(worst, std::abs(fused_f[i] - sf[i] - con[i]));
  CHECK(worst < 1e-6f);
}

TEST_CASE("zero half-face maps leave the structural map untouched") {
  Rng rng(4);
  const auto s = random_tensor({1, 8, 4, 4}, rng);
  NoGradGuard guard;
  const auto fused = fuse_cross_modal(Var<double>(s), Var<double>(Tensor<double>({1, 8, 4, 2})),
                                      Var<double>(Tensor<double>({1, 8, 4, 2})));
  CHECK(max_abs_diff(fused.value(), s) == 0.0);
}

TEST_CASE("halves that do not tile the structural map raise FusionError") {
  const Var<double> s(Tensor<double>({1, 8, 14, 14}));
  CHECK_THROWS_AS(fuse_cross_modal(s, Var<double>(Tensor<double>({1, 8, 14, 7})),
                                   Var<double>(Tensor<double>({1, 8, 14, 6}))),
                  FusionError);
  CHECK_THROWS_AS(fuse_cross_modal(s, Var<double>(Tensor<double>({1, 8, 13, 7})),
                                   Var<double>(Tensor<double>({1, 8, 13, 7}))),
                  FusionError);
  CHECK_THROWS_AS(fuse_cross_modal(s, Var<double>(Tensor<double>({1, 4, 14, 7})),
                                   Var<double>(Tensor<double>({1, 4, 14, 7}))),
                  FusionError);
}

TEST_CASE("cmem_forward traces a batch of two 224 faces") {
  Rng rng(5);
  const auto branches = build_branches<float>(ModelConfig{}, true, rng);
  const auto whole = Var<float>(random_tensor({2, 3, 224, 224}, rng).cast<float>());
  const auto left = Var<float>(random_tensor({2, 3, 224, 112}, rng).cast<float>());
  const auto right = Var<float>(random_tensor({2, 3, 224, 112}, rng).cast<float>());
  NoGradGuard guard;
  const auto out = cmem_forward(whole, left, right, branches, false);
  CHECK(out.structural.shape() == Shape{2, 256, 14, 14});
  CHECK(out.f_left.shape() == Shape{2, 256, 14, 7});
  CHECK(out.f_right.shape() == Shape{2, 256, 14, 7});
  CHECK(out.fused.shape() == Shape{2, 256, 14, 14});
}

TEST_CASE("shared branches on a symmetric face with a mirrored right half agree") {
  Rng rng(6);
  const auto branches = build_branches<float>(ModelConfig{}, true, rng);
  const Dataset ds = synth_generate(7, 2, 2, 0.0, 64);
  for (const auto& sample : ds.samples) {
    const FaceTriplet t = make_triplet(sample.image, true);
    NoGradGuard guard;
    const auto out = cmem_forward(Var<float>(image_to_tensor<float>(t.whole)),
                                  Var<float>(image_to_tensor<float>(t.left)),
                                  Var<float>(image_to_tensor<float>(t.right)), branches, false);
    CHECK(max_abs_diff(out.f_left.value(), out.f_right.value()) < 1e-5f);
  }
}

TEST_CASE("gradients of a scalar of the fused map reach all three branch inputs") {
  Rng rng(8);
  ModelConfig cfg;
  cfg.sharing = SharingPolicy::independent;
  const auto branches = build_branches<double>(cfg, true, rng);
  const auto r = check_op(
      [&](const std::vector<Var<double>>& v) {
        return cmem_forward(v[0], v[1], v[2], branches, true).fused;
      },
      {random_tensor({1, 3, 64, 64}, rng), random_tensor({1, 3, 64, 32}, rng),
       random_tensor({1, 3, 64, 32}, rng)},
      rng, 12);
  INFO("worst analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
  CHECK(r.checked == 36);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("input sizes whose half maps cannot tile are rejected up front") {
  // brute force: the mirror path needs ext(S/2) + ext(S - S/2) == ext(S)
  const auto ext = [](std::size_t x) {
    for (int i = 0; i < 4; ++i) x = (x + 1) / 2;
    return x;
  };
  ModelConfig c;
  for (std::size_t s = 40; s <= 320; s += 8) {
    c.input_size = s;
    const bool tiles = ext(s / 2) + ext(s - s / 2) == ext(s);
    CAPTURE(s);
    if (tiles) {
      CHECK_NOTHROW(c.validate());
    } else {
      CHECK_THROWS_AS(c.validate(), ConfigError);
    }
  }
  c.input_size = 112;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.use_cmem = false;
  c.use_symmetry_loss = false;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("nine spatial parts need at least a 3x3 refined map") {
  ModelConfig c;
  c.division.spatial_parts = 9;
  c.division.channel_groups = 9;
  c.input_size = 64;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.input_size = 96;
  CHECK_NOTHROW(c.validate());
}
