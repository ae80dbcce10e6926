#include "doctest.h"

#include <cmath>
#include <fstream>

#include "cmnet/engine.hpp"
#include "cmnet/evaluation.hpp"
#include "oracles.hpp"

using namespace cmnet;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.model.num_classes = 2;
  cfg.model.input_size = 64;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.seed = 5;
  return cfg;
}

TensorTable params_only(CmnetModel<float>& model) {
  TensorTable t;
  for (const auto& p : model.registry().parameters())
    t.set(p.name, p.var.value().template cast<double>(), StorageType::float64);
  return t;
}

bool bitwise_equal(const TensorTable& a, const TensorTable& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [k, v] : a.tensors) {
    const auto it = b.tensors.find(k);
    if (it == b.tensors.end() || !v.same_shape(it->second)) return false;
    if (v.storage() != it->second.storage()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("one plain gradient step on a scalar") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  auto p = Var<double>::parameter(Tensor<double>({1}, 1.0));
  Optimizer<double> opt(cfg, {p});
  backward(scale(p, 2.0));
  opt.step(cfg.lr);
  CHECK(p.value()[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(opt.steps() == 1);
}

TEST_CASE("momentum and weight decay follow the documented rule") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.01;
  auto p = Var<double>::parameter(Tensor<double>({1}, 1.0));
  Optimizer<double> opt(cfg, {p});
  double v = 0.0, ref = 1.0;
  for (int k = 0; k < 4; ++k) {
    opt.zero_grad();
    backward(scale(p, 2.0));
    opt.step(cfg.lr);
    v = 0.9 * v + 2.0;
    ref -= 0.1 * (v + 0.01 * ref);
    CHECK(p.value()[0] == doctest::Approx(ref).epsilon(1e-14));
  }
  // a parameter with no gradient only decays
  auto q = Var<double>::parameter(Tensor<double>({1}, 2.0));
  Optimizer<double> idle(cfg, {q});
  idle.step(0.1);
  CHECK(q.value()[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-14));
}

TEST_CASE("adaptive moments with bias correction") {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adaptive_moment;
  cfg.weight_decay = 0.0;
  auto p = Var<double>::parameter(Tensor<double>({2}, std::vector<double>{1.0, -3.0}));
  Optimizer<double> opt(cfg, {p});
  double m = 0.0, s = 0.0, ref = 1.0;
  const double g = 0.5;  // d(0.5 * p0)/dp0
  for (int k = 1; k <= 3; ++k) {
    opt.zero_grad();
    backward(sum(mul(p, Var<double>(Tensor<double>({2}, std::vector<double>{0.5, 0.0})))));
    opt.step(1e-3);
    m = 0.9 * m + 0.1 * g;
    s = 0.999 * s + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, k)), sh = s / (1 - std::pow(0.999, k));
    ref -= 1e-3 * mh / (std::sqrt(sh) + 1e-8);
    CHECK(p.value()[0] == doctest::Approx(ref).epsilon(1e-12));
  }
  // first step moves by about lr regardless of the gradient scale
  CHECK(std::abs(p.value()[0] - 1.0) == doctest::Approx(3e-3).epsilon(1e-4));
  CHECK(p.value()[1] == -3.0);
}

TEST_CASE("learning-rate schedules") {
  Schedule step{ScheduleKind::step, 0.1, 15};
  CHECK(step.lr_at(0.01, 0) == 0.01);
  CHECK(step.lr_at(0.01, 14) == 0.01);
  CHECK(step.lr_at(0.01, 15) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(step.lr_at(0.01, 30) == doctest::Approx(0.0001).epsilon(1e-12));
  Schedule halve{ScheduleKind::halve_every, 0.1, 50};
  CHECK(halve.lr_at(1e-4, 49) == 1e-4);
  CHECK(halve.lr_at(1e-4, 50) == 5e-5);
  CHECK(halve.lr_at(1e-4, 100) == 2.5e-5);
  CHECK(Schedule{}.lr_at(0.3, 1000) == 0.3);
}

TEST_CASE("configuration parsing and validation") {
  CHECK(parse_optimizer("sgd_momentum") == OptimizerKind::sgd_momentum);
  CHECK(parse_optimizer("adaptive_moment") == OptimizerKind::adaptive_moment);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
  CHECK(parse_schedule("halve_every") == ScheduleKind::halve_every);
  CHECK_THROWS_AS(parse_schedule("cosine"), ConfigError);

  TrainConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.model.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.model.ablation_row = 'z';
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batches carry whole faces and halves") {
  const Dataset ds = synth_generate(1, 3, 2, 0.0, 64);
  const PreparedSet set = prepare(ds, small_config());
  CHECK(set.images.size() == 6);
  CHECK(set.num_classes == 2);
  const auto b = make_batch<float>(set, {0, 4}, true);
  CHECK(b.whole.shape() == Shape{2, 3, 64, 64});
  CHECK(b.left.shape() == Shape{2, 3, 64, 32});
  CHECK(b.right.shape() == Shape{2, 3, 64, 32});
  CHECK(b.labels == Labels{0, 1});
  // symmetric faces with a mirrored right half
  CHECK(max_abs_diff(b.left.value(), b.right.value()) == 0.0f);
}

TEST_CASE("a small step along the analytic gradient lowers the loss of a frozen batch") {
  TrainConfig cfg = small_config();
  cfg.lr = 1e-4;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  auto model = build_model(cfg);
  const Dataset ds = synth_generate(2, 4, 2, 0.2, 64);
  const PreparedSet set = prepare(ds, cfg);
  const auto batch = make_batch<float>(set, {0, 1, 2, 3, 4, 5, 6, 7}, false);
  // inference-mode statistics keep the batch function fixed between steps
  model->set_training(false);
  std::vector<Var<float>> params;
  for (const auto& p : model->registry().parameters()) params.push_back(p.var);
  Optimizer<float> opt(cfg, params);

  const auto loss_now = [&] {
    const auto pass = model->forward(batch.whole, batch.left, batch.right);
    return model->losses(pass, batch.labels);
  };
  auto before = loss_now();
  backward(before.total);
  opt.step(cfg.lr);
  NoGradGuard guard;
  const double after = loss_now().bundle.total;
  CHECK(after < before.bundle.total);
}

TEST_CASE("epoch records satisfy the loss decomposition") {
  TrainConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.model.alpha = 0.7;
  auto model = build_model(cfg);
  const Dataset ds = synth_generate(3, 8, 2, 0.3, 64);
  std::size_t callbacks = 0;
  const History h = train(*model, ds, &ds, cfg, [&](const EpochRecord&) { ++callbacks; });
  REQUIRE(h.size() == 2);
  CHECK(callbacks == 2);
  for (const auto& r : h) {
    CHECK(std::abs(r.train_loss - (0.3 * r.l_sl + 0.7 * r.l_gl)) < 1e-6);
    CHECK(r.l_sl >= 0.0);
    CHECK(r.val_acc.has_value());
    CHECK(r.lr == cfg.lr);
  }
  CHECK(h[1].epoch == 1);
  CHECK_FALSE(model->training());
}

TEST_CASE("training is deterministic under a fixed seed") {
  TrainConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.augment = true;
  cfg.sampling = SamplingPolicy::balance;
  const Dataset ds = synth_generate(4, 6, 2, 0.2, 64);
  auto m1 = build_model(cfg);
  auto m2 = build_model(cfg);
  const History h1 = train(*m1, ds, nullptr, cfg);
  const History h2 = train(*m2, ds, nullptr, cfg);
  REQUIRE(h1.size() == h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].train_loss == h2[i].train_loss);
    CHECK(h1[i].l_sl == h2[i].l_sl);
    CHECK(h1[i].l_gl == h2[i].l_gl);
    CHECK(h1[i].train_acc == h2[i].train_acc);
  }
  CHECK(bitwise_equal(params_only(*m1), params_only(*m2)));

  TrainConfig other = cfg;
  other.seed = 6;
  auto m3 = build_model(other);
  train(*m3, ds, nullptr, other);
  CHECK_FALSE(bitwise_equal(params_only(*m1), params_only(*m3)));
}

TEST_CASE("alpha = 1 trains exactly like the run without the symmetry term") {
  TrainConfig with = small_config();
  with.model.alpha = 1.0;
  TrainConfig without = with;
  without.model.use_symmetry_loss = false;
  const Dataset ds = synth_generate(5, 8, 2, 0.5, 64);
  auto a = build_model(with);
  auto b = build_model(without);
  REQUIRE(bitwise_equal(params_only(*a), params_only(*b)));
  const History ha = train(*a, ds, nullptr, with);
  const History hb = train(*b, ds, nullptr, without);
  CHECK(ha[0].l_sl > 0.0);  // still recorded
  CHECK(ha[0].l_gl == hb[0].l_gl);
  CHECK(bitwise_equal(params_only(*a), params_only(*b)));
}

TEST_CASE("checkpoints round trip to identical evaluation") {
  TrainConfig cfg = small_config();
  auto model = build_model(cfg);
  const Dataset ds = synth_generate(6, 6, 2, 0.2, 64);
  const History h = train(*model, ds, nullptr, cfg);
  const EvalResult live = evaluate(*model, ds, cfg);
  const Tensor<float> live_logits = predict_logits(*model, prepare(ds, cfg), 4);

  const auto dir = cmnet::testing::fresh_dir("checkpoint");
  save_checkpoint(dir / "model.ckpt", make_checkpoint(*model, cfg, h));
  const Checkpoint back = load_checkpoint(dir / "model.ckpt");
  CHECK(back.epoch == 1);
  REQUIRE(back.history.size() == 1);
  CHECK(back.history[0].train_loss == h[0].train_loss);
  CHECK(back.config.seed == cfg.seed);
  CHECK(back.config.model.input_size == 64);

  auto restored = restore_model(back);
  const EvalResult again = evaluate(*restored, ds, back.config);
  CHECK(again.accuracy == live.accuracy);
  CHECK(again.predictions == live.predictions);
  CHECK(predict_logits(*restored, prepare(ds, back.config), 4).storage() == live_logits.storage());
  CHECK(evaluate(back, ds).predictions == live.predictions);

  // tampered tables are rejected
  TensorTable state = restored->state_table();
  state.tensors.erase(state.tensors.begin());
  CHECK_THROWS_AS(restored->load_state(state), LoadError);
  std::ofstream(dir / "junk.ckpt") << "garbage";
  CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
}

TEST_CASE("fine-tuning swaps the head only when the class count changes") {
  TrainConfig cfg = small_config();
  auto model = build_model(cfg);
  const Checkpoint ck = make_checkpoint(*model, cfg, {});
  auto same = restore_for_finetune(ck, 2, 9);
  CHECK(max_abs_diff(same->head().weight().value(), model->head().weight().value()) == 0.0f);
  auto wider = restore_for_finetune(ck, 5, 9);
  CHECK(wider->config().num_classes == 5);
  CHECK(wider->head().weight().shape()[0] == 5);
  const auto a = same->registry().parameters().front();
  const auto b = wider->registry().parameters().front();
  CHECK(a.name == b.name);
  CHECK(max_abs_diff(a.var.value(), b.var.value()) == 0.0f);
}

TEST_CASE("training errors") {
  TrainConfig cfg = small_config();
  auto model = build_model(cfg);
  CHECK_THROWS_AS(train(*model, Dataset{}, nullptr, cfg), TrainingError);
  CHECK_THROWS_AS(train(*model, synth_generate(1, 2, 3, 0.0, 64), nullptr, cfg), TrainingError);

  Dataset poisoned = synth_generate(1, 4, 2, 0.0, 64);
  for (float& v : poisoned.samples[0].image.pixels) v = NAN;
  cfg.batch_size = 8;
  try {
    train(*model, poisoned, nullptr, cfg);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("non-finite") != std::string::npos);
  }
}

TEST_CASE("history csv") {
  History h(2);
  h[0].train_loss = 1.5;
  h[1].epoch = 1;
  h[1].val_acc = 0.25;
  const auto dir = cmnet::testing::fresh_dir("history");
  write_history_csv(h, dir / "h.csv");
  std::ifstream in(dir / "h.csv");
  std::string header, r0, r1, extra;
  std::getline(in, header);
  std::getline(in, r0);
  std::getline(in, r1);
  CHECK(header.find("train_loss") != std::string::npos);
  CHECK(r0.rfind("0,", 0) == 0);
  CHECK(r1.find("0.25") != std::string::npos);
  CHECK_FALSE(std::getline(in, extra));
}
