#include "doctest.h"

#include <cmath>

#include "cmnet/layers.hpp"
#include "cmnet/ops.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cmnet;
using cmnet::testing::check_op;
using cmnet::testing::random_tensor;

namespace {
constexpr double kTol = 1e-5;
}

TEST_CASE("conv2d matches the direct loop, with and without padding") {
  Rng rng(1);
  const auto x = random_tensor({2, 3, 9, 8}, rng);
  const auto w = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      NoGradGuard guard;
      const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), {stride, pad});
      const auto ref = cmnet::testing::naive_conv(x, w, &b, stride, pad);
      REQUIRE(y.shape() == ref.shape());
      CHECK(max_abs_diff(y.value(), ref) < 1e-12);
    }
  }
}

TEST_CASE("conv2d on tiny maps and wide kernels, forward and backward") {
  // taps that fall entirely off a 1x1 or 2x3 plane, 1x1 projections, stride 2
  Rng rng(11);
  using V = std::vector<Var<double>>;
  struct Case {
    std::size_t h, w, k, stride, pad;
  };
  for (const Case c : {Case{1, 1, 7, 1, 3}, Case{2, 2, 7, 1, 3}, Case{2, 3, 3, 1, 1},
                       Case{4, 4, 1, 1, 0}, Case{5, 4, 1, 2, 0}, Case{7, 6, 7, 2, 3},
                       Case{3, 3, 3, 1, 2}, Case{6, 6, 3, 2, 1}}) {
    CAPTURE(c.h);
    CAPTURE(c.w);
    CAPTURE(c.k);
    CAPTURE(c.stride);
    CAPTURE(c.pad);
    const auto x = random_tensor({2, 2, c.h, c.w}, rng);
    const auto w = random_tensor({3, 2, c.k, c.k}, rng);
    {
      NoGradGuard guard;
      const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {c.stride, c.pad});
      const auto ref = cmnet::testing::naive_conv(x, w, nullptr, c.stride, c.pad);
      REQUIRE(y.shape() == ref.shape());
      CHECK(max_abs_diff(y.value(), ref) < 1e-12);
    }
    const auto r = check_op(
        [&](const V& v) { return conv2d(v[0], v[1], Var<double>(), {c.stride, c.pad}); }, {x, w},
        rng);
    CHECK(r.max_rel_error < kTol);
  }
}

TEST_CASE("conv and affine FLOPs follow the closed forms") {
  Rng rng(2);
  FlopScope scope;
  {
    NoGradGuard guard;
    conv2d(Var<double>(random_tensor({1, 3, 10, 10}, rng)),
           Var<double>(random_tensor({5, 3, 3, 3}, rng)), Var<double>(), {2, 1});
  }
  // Hout = Wout = 5
  CHECK(scope.flops() == 2ull * 3 * 3 * 3 * 5 * 5 * 5);
  FlopScope inner;
  {
    NoGradGuard guard;
    linear(Var<double>(random_tensor({1, 512}, rng)), Var<double>(random_tensor({7, 512}, rng)),
           Var<double>(random_tensor({7}, rng)));
  }
  CHECK(inner.flops() == 2ull * 512 * 7);
  CHECK(scope.flops() == 2ull * 3 * 3 * 3 * 5 * 5 * 5);  // nested scope does not leak out
}

TEST_CASE("batch norm in training mode normalises with batch statistics") {
  Rng rng(3);
  const auto x = random_tensor({3, 2, 4, 5}, rng, -2.0, 3.0);
  const auto gamma = random_tensor({2}, rng, 0.5, 1.5);
  const auto beta = random_tensor({2}, rng);
  Tensor<double> rm({2}, 0.0), rv({2}, 1.0);
  NoGradGuard guard;
  const auto y =
      batch_norm2d(Var<double>(x), Var<double>(gamma), Var<double>(beta), rm, rv, true, 0.1, 1e-5);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, sq = 0.0;
    const double count = 3 * 4 * 5;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 5; ++w) mean += x.at(n, c, h, w);
    mean /= count;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 5; ++w) sq += std::pow(x.at(n, c, h, w) - mean, 2);
    const double var = sq / count;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 5; ++w) {
          const double expect = gamma[c] * (x.at(n, c, h, w) - mean) / std::sqrt(var + 1e-5) + beta[c];
          CHECK(y.value().at(n, c, h, w) == doctest::Approx(expect).epsilon(1e-12));
        }
    CHECK(rm[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(rv[c] == doctest::Approx(0.9 + 0.1 * sq / (count - 1)).epsilon(1e-12));
  }
}

TEST_CASE("batch norm in inference mode uses the running estimates") {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  Tensor<double> rm({1}, 2.0), rv({1}, 4.0);
  NoGradGuard guard;
  const auto y = batch_norm2d(Var<double>(x), Var<double>(Tensor<double>({1}, 1.0)),
                              Var<double>(Tensor<double>({1}, 0.0)), rm, rv, false, 0.1, 0.0);
  CHECK(y.value()[0] == doctest::Approx(-0.5));
  CHECK(y.value()[1] == doctest::Approx(0.5));
  CHECK(rm[0] == 2.0);
}

TEST_CASE("max pool picks window maxima and ignores padding") {
  Tensor<double> x({1, 1, 3, 3}, std::vector<double>{-1, -2, -3, -4, -5, -6, -7, -8, -9});
  NoGradGuard guard;
  const auto y = max_pool2d(Var<double>(x), 3, 2, 1);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.value()[0] == -1);
  CHECK(y.value()[1] == -2);
  CHECK(y.value()[2] == -4);
  CHECK(y.value()[3] == -5);
}

TEST_CASE("gradients of every op match central differences") {
  Rng rng(4);
  using V = std::vector<Var<double>>;

  SUBCASE("conv2d") {
    const auto r = check_op([](const V& v) { return conv2d(v[0], v[1], v[2], {2, 1}); },
                            {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng),
                             random_tensor({3}, rng)},
                            rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("batch_norm2d training") {
    Tensor<double> rm({3}, 0.0), rv({3}, 1.0);
    const auto r = check_op(
        [&](const V& v) { return batch_norm2d(v[0], v[1], v[2], rm, rv, true, 0.1, 1e-5); },
        {random_tensor({2, 3, 3, 4}, rng), random_tensor({3}, rng, 0.5, 1.5),
         random_tensor({3}, rng)},
        rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("batch_norm2d inference") {
    Tensor<double> rm({3}, 0.2), rv({3}, 1.7);
    const auto r = check_op(
        [&](const V& v) { return batch_norm2d(v[0], v[1], v[2], rm, rv, false, 0.1, 1e-5); },
        {random_tensor({2, 3, 3, 4}, rng), random_tensor({3}, rng, 0.5, 1.5),
         random_tensor({3}, rng)},
        rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("max_pool2d") {
    const auto r = check_op([](const V& v) { return max_pool2d(v[0], 3, 2, 1); },
                            {random_tensor({1, 2, 7, 6}, rng)}, rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("relu and sigmoid") {
    const auto r = check_op([](const V& v) { return sigmoid(relu(v[0])); },
                            {random_tensor({2, 3, 4, 4}, rng)}, rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("add, mul, scale") {
    const auto r = check_op([](const V& v) { return scale(mul(add(v[0], v[1]), v[1]), -1.7); },
                            {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}, rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("gates") {
    const auto r = check_op(
        [](const V& v) { return mul_spatial_gate(mul_channel_gate(v[0], v[1]), v[2]); },
        {random_tensor({2, 3, 4, 5}, rng), random_tensor({2, 3}, rng),
         random_tensor({2, 1, 4, 5}, rng)},
        rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
  SUBCASE("pooling reductions") {
    const auto r = check_op(
        [](const V& v) {
          return concat<double>({global_avg_pool(v[0]), global_max_pool(v[0])}, 1);
        },
        {random_tensor({2, 3, 4, 5}, rng)}, rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
    const auto s = check_op(
        [](const V& v) { return concat<double>({channel_mean(v[0]), channel_max(v[0])}, 1); },
        {random_tensor({2, 3, 4, 5}, rng)}, rng);
    CHECK(s.max_rel_error < kTol);
  }
  SUBCASE("concat and slice on every axis") {
    for (std::size_t axis = 0; axis < 4; ++axis) {
      const auto r = check_op(
          [axis](const V& v) { return slice(concat<double>({v[0], v[1]}, axis), axis, 1, 4); },
          {random_tensor({3, 3, 3, 3}, rng), random_tensor({3, 3, 3, 3}, rng)}, rng);
      INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
    }
  }
  SUBCASE("linear and sum") {
    const auto r = check_op([](const V& v) { return sum(linear(v[0], v[1], v[2])); },
                            {random_tensor({3, 6}, rng), random_tensor({4, 6}, rng),
                             random_tensor({4}, rng)},
                            rng);
    INFO("worst ", r.worst_index, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_error < kTol);
  }
}

TEST_CASE("a shared parameter accumulates gradient from every use") {
  auto p = Var<double>::parameter(Tensor<double>({1}, 3.0));
  backward(add(mul(p, p), p));  // d/dp (p^2 + p) = 2p + 1
  CHECK(p.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto p = Var<double>::parameter(Tensor<double>({2}, 1.0));
  NoGradGuard guard;
  const auto y = mul(p, p);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("NaN inputs are not swallowed by relu or the max reductions") {
  NoGradGuard guard;
  Tensor<double> x({1, 2, 2, 2}, 1.0);
  x[1] = std::nan("");   // channel 0, second pixel
  x[4] = -std::nan("");  // channel 1, first pixel
  const Var<double> v(x);
  const auto has_nan = [](const Tensor<double>& t) {
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (std::isnan(t[i])) return true;
    return false;
  };
  CHECK(std::isnan(relu(v).value()[1]));
  CHECK(relu(v).value()[0] == 1.0);
  CHECK(has_nan(max_pool2d(v, 2, 2, 0).value()));
  const auto g = global_max_pool(v).value();
  CHECK(std::isnan(g[0]));
  CHECK(std::isnan(g[1]));
  const auto cm = channel_max(v).value();
  CHECK(std::isnan(cm[0]));
  CHECK(std::isnan(cm[1]));
  CHECK(cm[2] == 1.0);
}
