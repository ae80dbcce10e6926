#include "cmnet/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "cmnet/config.hpp"
#include "cmnet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cmnet {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adaptive_moment ? "adaptive_moment" : "sgd_momentum";
}

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (text == "adaptive_moment") return OptimizerKind::adaptive_moment;
  throw ConfigError("unknown optimizer '" + text + "' (expected sgd_momentum or adaptive_moment)");
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::none: return "none";
    case ScheduleKind::step: return "step";
    case ScheduleKind::halve_every: return "halve_every";
  }
  return "?";
}

ScheduleKind parse_schedule(const std::string& text) {
  if (text == "none") return ScheduleKind::none;
  if (text == "step") return ScheduleKind::step;
  if (text == "halve_every") return ScheduleKind::halve_every;
  throw ConfigError("unknown schedule '" + text + "' (expected none, step or halve_every)");
}

double Schedule::lr_at(double base_lr, std::size_t epoch) const {
  if (kind == ScheduleKind::none) return base_lr;
  const double f = kind == ScheduleKind::halve_every ? 0.5 : factor;
  const auto decays = static_cast<double>(epoch / every);
  return base_lr * std::pow(f, decays);
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (schedule.kind != ScheduleKind::none && schedule.every == 0) {
    throw ConfigError("schedule interval must be at least one epoch");
  }
  if (schedule.kind == ScheduleKind::step && !(schedule.factor > 0.0)) {
    throw ConfigError("schedule factor must be positive");
  }
  for (float s : norm.stddev) {
    if (!(s > 0.0f)) throw ConfigError("normalisation std must be positive");
  }
  effective_model().validate();
}

ModelConfig TrainConfig::effective_model() const {
  return model.ablation_row ? ablation_config(model, *model.ablation_row) : model;
}

template <typename T>
Optimizer<T>::Optimizer(const TrainConfig& config, std::vector<Var<T>> params)
    : kind_(config.optimizer),
      momentum_(config.momentum),
      weight_decay_(config.weight_decay),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      params_(std::move(params)) {
  for (const auto& p : params_) {
    first_.emplace_back(p.shape());
    if (kind_ == OptimizerKind::adaptive_moment) second_.emplace_back(p.shape());
  }
}

template <typename T>
void Optimizer<T>::step(double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var<T>& p = params_[k];
    Tensor<T>& value = p.mutable_value();
    const Tensor<T>& grad = p.grad();
    const bool has_grad = !grad.empty();
    Tensor<T>& m = first_[k];
    if (kind_ == OptimizerKind::sgd_momentum) {
      const T mu = static_cast<T>(momentum_);
      const T wd = static_cast<T>(weight_decay_);
      const T rate = static_cast<T>(lr);
      for (std::size_t i = 0; i < value.numel(); ++i) {
        const T g = has_grad ? grad[i] : T{0};
        m[i] = mu * m[i] + g;
        value[i] -= rate * (m[i] + wd * value[i]);
      }
    } else {
      Tensor<T>& v = second_[k];
      for (std::size_t i = 0; i < value.numel(); ++i) {
        const double g = (has_grad ? static_cast<double>(grad[i]) : 0.0) +
                         weight_decay_ * static_cast<double>(value[i]);
        const double mi = beta1_ * m[i] + (1.0 - beta1_) * g;
        const double vi = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1, vhat = vi / bc2;
        value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Optimizer<float>;
template class Optimizer<double>;

PreparedSet prepare(const Dataset& dataset, const TrainConfig& config) {
  PreparedSet set;
  set.num_classes = dataset.num_classes();
  const std::size_t size = config.model.input_size;
  set.images.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    set.images.push_back(preprocess(s.image, size, config.grayscale_expand, config.norm));
    set.labels.push_back(s.label);
  }
  return set;
}

template <typename T>
BatchTensors<T> make_batch(const PreparedSet& set, const std::vector<std::size_t>& indices,
                           bool mirror_right) {
  std::vector<FaceTriplet> triplets;
  triplets.reserve(indices.size());
  BatchTensors<T> batch;
  for (std::size_t i : indices) {
    triplets.push_back(make_triplet(set.images.at(i), mirror_right));
    batch.labels.push_back(set.labels.at(i));
  }
  std::vector<const Image*> w, l, r;
  for (const auto& t : triplets) {
    w.push_back(&t.whole);
    l.push_back(&t.left);
    r.push_back(&t.right);
  }
  batch.whole = Var<T>(images_to_tensor<T>(w));
  batch.left = Var<T>(images_to_tensor<T>(l));
  batch.right = Var<T>(images_to_tensor<T>(r));
  return batch;
}

template BatchTensors<float> make_batch(const PreparedSet&, const std::vector<std::size_t>&, bool);
template BatchTensors<double> make_batch(const PreparedSet&, const std::vector<std::size_t>&,
                                         bool);

Tensor<float> predict_logits(CmnetModel<float>& model, const PreparedSet& set,
                             std::size_t batch_size) {
  const std::size_t k = model.config().num_classes;
  Tensor<float> out({set.images.size(), k});
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard guard;
  for (std::size_t start = 0; start < set.images.size(); start += batch_size) {
    const std::size_t end = std::min(set.images.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto batch = make_batch<float>(set, idx, model.config().mirror_right);
    auto pass = model.forward(batch.whole, batch.left, batch.right);
    std::copy_n(pass.logits.value().data(), idx.size() * k, out.data() + start * k);
  }
  model.set_training(was_training);
  return out;
}

std::vector<std::size_t> argmax_rows(const Tensor<float>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * k;
    pred[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
  }
  return pred;
}

std::unique_ptr<CmnetModel<float>> build_model(const TrainConfig& config) {
  Rng root(config.seed);
  Rng model_rng = root.fork("model");
  return std::make_unique<CmnetModel<float>>(config.effective_model(), model_rng);
}

namespace {

Image augment_image(const Image& src, std::size_t pad, Rng& rng) {
  Image img = rng.coin() ? mirror_horizontal(src) : src;
  if (pad == 0) return img;
  const std::size_t dy = rng.index(2 * pad + 1), dx = rng.index(2 * pad + 1);
  Image out(img.height, img.width, img.channels, 0.0f);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(img.height)) continue;
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::ptrdiff_t sx =
          static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(img.width)) continue;
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
      }
    }
  }
  return out;
}

std::vector<Var<float>> trainable(CmnetModel<float>& model) {
  std::vector<Var<float>> params;
  for (const auto& p : model.registry().parameters()) params.push_back(p.var);
  return params;
}

}  // namespace

History train(CmnetModel<float>& model, const Dataset& train_set, const Dataset* val_set,
              const TrainConfig& config, const EpochCallback& on_epoch,
              std::size_t start_epoch) {
  config.validate();
  if (train_set.samples.empty()) throw TrainingError("training set is empty");
  if (train_set.num_classes() != model.config().num_classes) {
    throw TrainingError("training set has " + std::to_string(train_set.num_classes()) +
                        " classes, model head has " +
                        std::to_string(model.config().num_classes));
  }
  PreparedSet prepared = prepare(train_set, config);
  std::optional<PreparedSet> prepared_val;
  if (val_set && !val_set->samples.empty()) prepared_val = prepare(*val_set, config);

  Optimizer<float> optimizer(config, trainable(model));
  const Rng root(config.seed);
  const bool mirror = model.config().mirror_right;
  History history;

  for (std::size_t epoch = start_epoch; epoch < start_epoch + config.epochs; ++epoch) {
    Rng epoch_rng = root.fork("epoch/" + std::to_string(epoch));
    const SamplerPlan plan = balance_sampler(train_set, config.sampling, epoch_rng.engine()());
    Rng aug_rng = epoch_rng.fork("augment");
    const double lr = config.schedule.lr_at(config.lr, epoch);

    model.set_training(true);
    double sum_total = 0.0, sum_sl = 0.0, sum_gl = 0.0;
    std::size_t correct = 0, seen = 0, batch_index = 0;
    for (std::size_t start = 0; start < plan.epoch_indices.size();
         start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(plan.epoch_indices.size(), start + config.batch_size);
      std::vector<std::size_t> idx(plan.epoch_indices.begin() + static_cast<std::ptrdiff_t>(start),
                                   plan.epoch_indices.begin() + static_cast<std::ptrdiff_t>(end));
      BatchTensors<float> batch;
      if (config.augment) {
        PreparedSet view;
        for (std::size_t i : idx) {
          view.images.push_back(augment_image(prepared.images[i], config.crop_padding, aug_rng));
          view.labels.push_back(prepared.labels[i]);
        }
        std::vector<std::size_t> local(idx.size());
        for (std::size_t i = 0; i < local.size(); ++i) local[i] = i;
        batch = make_batch<float>(view, local, mirror);
      } else {
        batch = make_batch<float>(prepared, idx, mirror);
      }

      optimizer.zero_grad();
      std::optional<ForwardPass<float>> maybe_pass;
      std::optional<LossTerms<float>> maybe_terms;
      try {
        maybe_pass = model.forward(batch.whole, batch.left, batch.right);
        maybe_terms = model.losses(*maybe_pass, batch.labels);
      } catch (const InputError& e) {
        // e.g. NaN pixels reaching the symmetry term, which rejects them itself
        std::ostringstream msg;
        msg << "bad values at epoch " << epoch << ", batch " << batch_index << ": " << e.what();
        throw TrainingError(msg.str());
      }
      const ForwardPass<float>& pass = *maybe_pass;
      LossTerms<float>& terms = *maybe_terms;
      const LossBundle& b = terms.bundle;
      if (!std::isfinite(b.total) || !std::isfinite(b.l_sl) || !std::isfinite(b.l_gl)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index
            << ": total=" << b.total << " l_sl=" << b.l_sl << " l_gl=" << b.l_gl;
        throw TrainingError(msg.str());
      }
      backward(terms.total);
      optimizer.step(lr);

      const double n = static_cast<double>(idx.size());
      sum_total += b.total * n;
      sum_sl += b.l_sl * n;
      sum_gl += b.l_gl * n;
      const auto pred = argmax_rows(pass.logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
      seen += idx.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = sum_total / static_cast<double>(seen);
    rec.l_sl = sum_sl / static_cast<double>(seen);
    rec.l_gl = sum_gl / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    if (prepared_val) {
      const auto pred = argmax_rows(predict_logits(model, *prepared_val, config.batch_size));
      std::size_t hit = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == prepared_val->labels[i];
      rec.val_acc = static_cast<double>(hit) / static_cast<double>(pred.size());
    }
    spdlog::info("epoch {} lr {:.6g} loss {:.6f} (sl {:.6f} gl {:.6f}) train_acc {:.4f}{}", epoch,
                 rec.lr, rec.train_loss, rec.l_sl, rec.l_gl, rec.train_acc,
                 rec.val_acc ? fmt::format(" val_acc {:.4f}", *rec.val_acc) : std::string());
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.set_training(false);
  return history;
}

namespace {

json history_json(const History& history) {
  json arr = json::array();
  for (const auto& r : history) {
    json j = {{"epoch", r.epoch},         {"lr", r.lr},   {"train_loss", r.train_loss},
              {"l_sl", r.l_sl},           {"l_gl", r.l_gl}, {"train_acc", r.train_acc},
              {"val_acc", nullptr}};
    if (r.val_acc) j["val_acc"] = *r.val_acc;
    arr.push_back(std::move(j));
  }
  return arr;
}

History history_from_json(const json& arr) {
  History h;
  for (const auto& j : arr) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.l_sl = j.at("l_sl").get<double>();
    r.l_gl = j.at("l_gl").get<double>();
    r.train_acc = j.at("train_acc").get<double>();
    if (!j.at("val_acc").is_null()) r.val_acc = j.at("val_acc").get<double>();
    h.push_back(r);
  }
  return h;
}

}  // namespace

Checkpoint make_checkpoint(CmnetModel<float>& model, const TrainConfig& config,
                           const History& history) {
  Checkpoint ck;
  ck.parameters = model.state_table();
  ck.config = config;
  ck.epoch = history.empty() ? 0 : history.back().epoch + 1;
  ck.history = history;
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  TensorTable table = checkpoint.parameters;
  json meta;
  meta["kind"] = "checkpoint";
  meta["epoch"] = checkpoint.epoch;
  meta["config"] = json(to_key_values(checkpoint.config));
  meta["history"] = history_json(checkpoint.history);
  table.metadata = meta.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_tensor_table(path, table);
}

Checkpoint load_checkpoint(const fs::path& path) {
  TensorTable table = load_tensor_table(path);
  json meta;
  try {
    meta = json::parse(table.metadata);
  } catch (const json::exception& e) {
    throw LoadError("checkpoint " + path.string() + " has unreadable metadata: " + e.what());
  }
  if (!meta.is_object() || meta.value("kind", "") != "checkpoint") {
    throw LoadError(path.string() + " is not a checkpoint");
  }
  Checkpoint ck;
  ck.epoch = meta.at("epoch").get<std::size_t>();
  for (const auto& [key, value] : meta.at("config").items()) {
    apply_key_value(ck.config, key, value.get<std::string>());
  }
  ck.history = history_from_json(meta.at("history"));
  table.metadata.clear();
  ck.parameters = std::move(table);
  return ck;
}

std::unique_ptr<CmnetModel<float>> restore_model(const Checkpoint& checkpoint) {
  auto model = build_model(checkpoint.config);
  model->load_state(checkpoint.parameters);
  model->set_training(false);
  return model;
}

std::unique_ptr<CmnetModel<float>> restore_for_finetune(const Checkpoint& checkpoint,
                                                        std::size_t num_classes,
                                                        std::uint64_t seed) {
  TrainConfig config = checkpoint.config;
  config.model.num_classes = num_classes;
  config.seed = seed;
  auto model = build_model(config);
  TensorTable state = model->state_table();
  const bool same_head = num_classes == checkpoint.config.model.num_classes;
  for (auto& [name, tensor] : state.tensors) {
    const bool is_head = name.rfind("head.", 0) == 0;
    if (is_head && !same_head) continue;
    const auto it = checkpoint.parameters.tensors.find(name);
    if (it == checkpoint.parameters.tensors.end()) {
      throw LoadError("checkpoint is missing key '" + name + "'");
    }
    tensor = it->second;
  }
  model->load_state(state);
  return model;
}

void write_history_csv(const History& history, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,lr,train_loss,l_sl,l_gl,train_acc,val_acc\n";
  out << std::setprecision(9);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.l_sl << ',' << r.l_gl << ','
        << r.train_acc << ',';
    if (r.val_acc) out << *r.val_acc;
    out << '\n';
  }
}

}  // namespace cmnet
