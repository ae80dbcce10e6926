#include "doctest.h"

#include "cmnet/backbones.hpp"
#include "cmnet/model.hpp"
#include "gradcheck.hpp"

using namespace cmnet;
using cmnet::testing::random_tensor;

namespace {

Var<float> random_input(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Var<float>(random_tensor(std::move(shape), rng).cast<float>());
}

Shape run(FeatureExtractor<float>& net, Shape in) {
  NoGradGuard guard;
  return net(random_input(std::move(in), 9), false).shape();
}

// Reference-layout table: every tensor of stem + layer1..4 under its bare name.
TensorTable reference_table(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg;
  auto bn1 = build_basic_network_i<double>(cfg, rng);
  auto bn2 = build_basic_network_ii<double>(cfg, rng);
  ParameterRegistry<double> reg;
  bn1->collect("", reg);
  bn2->collect("", reg);
  TensorTable table;
  for (const auto& p : reg.parameters())
    table.set(p.name, random_tensor(p.var.shape(), rng), StorageType::float32);
  for (const auto& b : reg.buffers())
    table.set(b.name, random_tensor(b.tensor->shape(), rng, 0.5, 1.5), StorageType::float32);
  return table;
}

}  // namespace

TEST_CASE("Basic Network I maps 224 faces and 224x112 halves to 256-channel stride-16 maps") {
  Rng rng(1);
  auto net = build_basic_network_i<float>(ModelConfig{}, rng);
  CHECK(net->out_channels() == 256);
  CHECK(net->stride_product() == 16);
  CHECK(run(*net, {1, 3, 224, 224}) == Shape{1, 256, 14, 14});
  CHECK(run(*net, {1, 3, 224, 112}) == Shape{1, 256, 14, 7});
}

TEST_CASE("Basic Network I rejects a four-channel configuration") {
  Rng rng(1);
  ModelConfig cfg;
  cfg.input_channels = 4;
  CHECK_THROWS_AS(build_basic_network_i<float>(cfg, rng), ConfigError);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  auto net = build_basic_network_i<float>(ModelConfig{}, rng);
  CHECK_THROWS_AS(run(*net, {1, 4, 64, 64}), ConfigError);
}

TEST_CASE("Basic Network II halves a 256-channel map into 512 channels") {
  Rng rng(2);
  auto net = build_basic_network_ii<float>(ModelConfig{}, rng);
  CHECK(net->stride_product() == 2);
  CHECK(run(*net, {1, 256, 14, 14}) == Shape{1, 512, 7, 7});
  CHECK(run(*net, {2, 256, 14, 14}) == Shape{2, 512, 7, 7});
  CHECK_THROWS_AS(run(*net, {1, 128, 14, 14}), ConfigError);
}

TEST_CASE("shape contract holds for sizes that are multiples of 32") {
  Rng rng(3);
  auto bn1 = build_basic_network_i<float>(ModelConfig{}, rng);
  auto bn2 = build_basic_network_ii<float>(ModelConfig{}, rng);
  for (std::size_t h : {64, 96, 128, 224}) {
    for (std::size_t w : {64, 96, 128, 224}) {
      const Shape in{1, 3, h, w};
      const Shape mid = run(*bn1, in);
      CHECK(mid == bn1->output_shape(in));
      CHECK(mid == Shape{1, 256, h / 16, w / 16});
      CHECK(run(*bn2, mid) == Shape{1, 512, h / 32, w / 32});
    }
  }
}

TEST_CASE("layer ordering follows the reference layout") {
  Rng rng(4);
  auto bn1 = build_basic_network_i<float>(ModelConfig{}, rng);
  auto bn2 = build_basic_network_ii<float>(ModelConfig{}, rng);
  CHECK(bn1->stage_count() == 3);
  CHECK(bn2->stage_count() == 1);
  // stem (conv + 4 BN tensors), 6 plain blocks x 10, 2 downsampling blocks x 15
  CHECK(bn1->tensor_count() == 5 + 20 + 25 + 25);
  CHECK(bn2->tensor_count() == 25);
  ParameterRegistry<float> reg;
  bn1->collect("", reg);
  std::size_t convs = 0;
  for (const auto& p : reg.parameters()) convs += p.var.shape().size() == 4;
  // 13 main-path convolutions plus two 1x1 downsample projections
  CHECK(convs == 15);
}

TEST_CASE("load_pretrained copies one backbone plus stage 4 under full sharing") {
  const TensorTable table = reference_table(5);
  Rng rng(6);
  CmnetModel<float> model(ModelConfig{}, rng);
  const std::size_t copied = model.load_pretrained(table);
  CHECK(copied == model.branches().sb->tensor_count() +
                      model.sfirm().basic_network_ii()->tensor_count());
  CHECK(copied == 100);

  ParameterRegistry<float> reg;
  model.branches().sb->collect("", reg);
  model.sfirm().basic_network_ii()->collect("", reg);
  const auto same = [&](const std::string& key, const Tensor<float>& got) {
    const auto expect = table.tensors.at(key).cast<float>();
    return max_abs_diff(expect, got) == 0.0f;
  };
  for (const auto& p : reg.parameters()) CHECK_MESSAGE(same(p.name, p.var.value()), p.name);
  for (const auto& b : reg.buffers()) CHECK_MESSAGE(same(b.name, *b.tensor), b.name);
}

TEST_CASE("load_pretrained copies into every distinct branch") {
  const TensorTable table = reference_table(5);
  Rng rng(6);
  ModelConfig cfg;
  cfg.sharing = SharingPolicy::independent;
  CmnetModel<float> model(cfg, rng);
  CHECK(model.load_pretrained(table) == 3 * 75 + 25);
  cfg.sharing = SharingPolicy::halves_shared;
  CmnetModel<float> halves(cfg, rng);
  CHECK(halves.load_pretrained(table) == 2 * 75 + 25);
}

TEST_CASE("load_pretrained names the missing key and both shapes on mismatch") {
  Rng rng(7);
  CmnetModel<float> model(ModelConfig{}, rng);

  TensorTable missing = reference_table(8);
  missing.tensors.erase("layer3.1.conv2.weight");
  try {
    model.load_pretrained(missing);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("layer3.1.conv2.weight") != std::string::npos);
  }

  TensorTable wrong = reference_table(8);
  wrong.tensors["layer2.0.conv1.weight"] = Tensor<double>({128, 64, 1, 1});
  try {
    model.load_pretrained(wrong);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[128x64x3x3]") != std::string::npos);
    CHECK(msg.find("[128x64x1x1]") != std::string::npos);
  }
}

TEST_CASE("full sharing lands in the reference parameter band") {
  Rng rng(9);
  CmnetModel<float> model(ModelConfig{}, rng);
  const std::size_t params = model.parameter_count();
  CHECK(params >= 10'600'000);
  CHECK(params <= 13'000'000);
  Rng rng2(9);
  ModelConfig indep;
  indep.sharing = SharingPolicy::independent;
  CmnetModel<float> big(indep, rng2);
  CHECK(big.parameter_count() > 16'000'000);
}

TEST_CASE("with full sharing a change to UB shows up in SB and LB") {
  Rng rng(10);
  auto branches = build_branches<float>(ModelConfig{}, true, rng);
  CHECK(branches.sb == branches.ub);
  CHECK(branches.ub == branches.lb);
  const auto x = random_input({1, 3, 64, 64}, 11);
  NoGradGuard guard;
  const auto before_sb = (*branches.sb)(x, false).value();
  const auto before_lb = (*branches.lb)(x, false).value();

  ParameterRegistry<float> reg;
  branches.ub->collect("", reg);
  Var<float> w = reg.parameters().front().var;  // stem conv
  for (float& v : w.mutable_value().storage()) v *= 1.5f;

  const auto after_sb = (*branches.sb)(x, false).value();
  const auto after_lb = (*branches.lb)(x, false).value();
  CHECK(max_abs_diff(before_sb, after_sb) > 0.0f);
  CHECK(max_abs_diff(after_sb, after_lb) == 0.0f);
  CHECK(max_abs_diff(before_sb, before_lb) == 0.0f);
}

TEST_CASE("halves_shared ties UB to LB only") {
  Rng rng(12);
  ModelConfig cfg;
  cfg.sharing = SharingPolicy::halves_shared;
  auto branches = build_branches<float>(cfg, true, rng);
  CHECK(branches.ub == branches.lb);
  CHECK(branches.sb != branches.ub);
  CHECK(branches.distinct().size() == 2);
}

TEST_CASE("forward pass is deterministic and construction is seeded") {
  const auto x = random_input({2, 3, 64, 64}, 13);
  Rng a(14), b(14);
  auto net_a = build_basic_network_i<float>(ModelConfig{}, a);
  auto net_b = build_basic_network_i<float>(ModelConfig{}, b);
  NoGradGuard guard;
  const auto ya = (*net_a)(x, false).value();
  CHECK(max_abs_diff(ya, (*net_a)(x, false).value()) == 0.0f);
  CHECK(max_abs_diff(ya, (*net_b)(x, false).value()) == 0.0f);
}
