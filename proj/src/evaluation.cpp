#include "cmnet/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "cmnet/errors.hpp"

namespace fs = std::filesystem;

namespace cmnet {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts) {
    for (auto v : row) t += v;
  }
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
  return t;
}

double ConfusionMatrix::accuracy() const {
  const std::uint64_t t = total();
  return t == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(t);
}

ConfusionMatrix confusion_matrix(const Labels& truth, const std::vector<std::size_t>& predicted,
                                 std::size_t num_classes) {
  if (truth.size() != predicted.size()) {
    throw EvaluationError("confusion_matrix: " + std::to_string(truth.size()) + " labels but " +
                          std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm;
  cm.counts.assign(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  cm.normalized.assign(num_classes, std::vector<double>(num_classes, 0.0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw EvaluationError("confusion_matrix: class index outside [0, " +
                            std::to_string(num_classes) + ")");
    }
    ++cm.counts[truth[i]][predicted[i]];
  }
  for (std::size_t r = 0; r < num_classes; ++r) {
    std::uint64_t row_total = 0;
    for (auto v : cm.counts[r]) row_total += v;
    if (row_total == 0) continue;
    for (std::size_t c = 0; c < num_classes; ++c) {
      cm.normalized[r][c] = static_cast<double>(cm.counts[r][c]) / static_cast<double>(row_total);
    }
  }
  return cm;
}

namespace {

EvalResult evaluate_prepared(CmnetModel<float>& model, const PreparedSet& set,
                             std::size_t batch_size) {
  EvalResult res;
  res.predictions = argmax_rows(predict_logits(model, set, batch_size));
  res.confusion = confusion_matrix(set.labels, res.predictions, model.config().num_classes);
  res.accuracy = res.confusion.accuracy();
  return res;
}

TrainConfig with_model_size(const TrainConfig& config, const CmnetModel<float>& model) {
  TrainConfig c = config;
  c.model.input_size = model.config().input_size;
  return c;
}

}  // namespace

EvalResult evaluate(CmnetModel<float>& model, const Dataset& dataset, const TrainConfig& config) {
  if (dataset.num_classes() != model.config().num_classes) {
    throw EvaluationError("dataset has " + std::to_string(dataset.num_classes()) +
                          " classes, model head has " +
                          std::to_string(model.config().num_classes));
  }
  if (dataset.samples.empty()) throw EvaluationError("evaluation set is empty");
  return evaluate_prepared(model, prepare(dataset, with_model_size(config, model)),
                           config.batch_size);
}

EvalResult evaluate(const Checkpoint& checkpoint, const Dataset& dataset) {
  auto model = restore_model(checkpoint);
  return evaluate(*model, dataset, checkpoint.config);
}

EvalResult cross_evaluate(CmnetModel<float>& model, const Dataset& foreign,
                          const LabelMap& label_map, const TrainConfig& config) {
  const std::size_t k = model.config().num_classes;
  std::set<std::size_t> targets;
  for (const auto& [from, to] : label_map) {
    if (to >= k) {
      throw MappingError("label map sends " + std::to_string(from) + " to " + std::to_string(to) +
                         ", outside the model's " + std::to_string(k) + " classes");
    }
    if (!targets.insert(to).second) {
      throw MappingError("label map is not injective: class " + std::to_string(to) +
                         " is the image of two foreign labels");
    }
  }
  if (foreign.samples.empty()) throw EvaluationError("evaluation set is empty");
  Dataset remapped;
  remapped.split = foreign.split;
  remapped.class_names.assign(k, "");
  remapped.samples.reserve(foreign.size());
  for (const auto& s : foreign.samples) {
    const auto it = label_map.find(s.label);
    if (it == label_map.end()) {
      const std::string name =
          s.label < foreign.class_names.size() ? foreign.class_names[s.label] : "?";
      throw MappingError("foreign label " + std::to_string(s.label) + " (" + name +
                         ") has no entry in the label map");
    }
    remapped.samples.push_back({s.image, it->second, s.source});
  }
  TrainConfig c = with_model_size(config, model);
  c.grayscale_expand = true;
  return evaluate_prepared(model, prepare(remapped, c), config.batch_size);
}

LabelMap parse_label_map(const std::string& text) {
  LabelMap map;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    std::size_t from = 0, to = 0;
    try {
      if (colon == std::string::npos) throw std::invalid_argument("no colon");
      std::size_t used = 0;
      from = std::stoul(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("trailing");
      const std::string rhs = item.substr(colon + 1);
      to = std::stoul(rhs, &used);
      if (used != rhs.size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw ConfigError("label map entry '" + item + "' is not of the form from:to");
    }
    if (!map.emplace(from, to).second) {
      throw MappingError("label map lists foreign label " + std::to_string(from) + " twice");
    }
  }
  return map;
}

std::vector<char> parse_rows(const std::string& text) {
  std::vector<char> rows;
  const auto push = [&](char r) {
    if (!is_ablation_row(r)) {
      throw ConfigError(std::string("unknown ablation row '") + r + "', expected a..i");
    }
    rows.push_back(r);
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ',' || c == ' ') {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    std::size_t gap = 0;
    if (text.compare(j, 2, "..") == 0) gap = 2;
    else if (j < text.size() && text[j] == '-') gap = 1;
    if (gap > 0 && j + gap < text.size()) {
      const char last = text[j + gap];
      if (!is_ablation_row(c) || !is_ablation_row(last)) {
        throw ConfigError("unknown ablation row in range '" + text.substr(i, gap + 2) + "'");
      }
      if (last < c) throw ConfigError("ablation row range '" + text.substr(i, gap + 2) + "' is empty");
      for (char r = c; r <= last; ++r) push(r);
      i = j + gap + 1;
    } else {
      push(c);
      ++i;
    }
  }
  if (rows.empty()) throw ConfigError("no ablation rows selected");
  return rows;
}

std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<char>& rows,
                                      const Dataset& train_set, const Dataset& test_set) {
  std::vector<AblationRow> table;
  for (char row : rows) {
    TrainConfig c = base;
    c.model.ablation_row = row;
    c.validate();
    auto model = build_model(c);
    AblationRow out;
    out.row = row;
    out.description = ablation_description(row);
    out.parameters = model->parameter_count();
    spdlog::info("ablation row {} ({}), {} parameters", row, out.description, out.parameters);
    if (c.epochs > 0) {
      const History h = train(*model, train_set, nullptr, c);
      out.train_acc = h.back().train_acc;
    }
    out.accuracy = evaluate(*model, test_set, c).accuracy;
    table.push_back(out);
  }
  return table;
}

ComplexityReport profile(const ModelConfig& config, std::size_t input_size, bool measure_latency,
                         std::size_t timed, std::size_t warmup, std::size_t latency_batch) {
  ModelConfig c = config;
  c.input_size = input_size;
  Rng rng(0);
  CmnetModel<float> model(c, rng);
  model.set_training(false);
  ComplexityReport report;
  report.input_size = input_size;
  report.parameter_count = model.parameter_count();
  report.latency_batch = latency_batch;

  NoGradGuard guard;
  const auto run = [&](std::size_t n) {
    const std::size_t half = input_size / 2;
    Var<float> whole(Tensor<float>({n, 3, input_size, input_size}, 0.0f));
    Var<float> left(Tensor<float>({n, 3, input_size, half}, 0.0f));
    Var<float> right(Tensor<float>({n, 3, input_size, input_size - half}, 0.0f));
    model.forward(whole, left, right);
  };
  {
    FlopScope scope;
    run(1);
    report.flops = scope.flops();
  }
  if (measure_latency) {
    for (std::size_t i = 0; i < warmup; ++i) run(latency_batch);
    std::vector<double> ms;
    for (std::size_t i = 0; i < std::max<std::size_t>(timed, 1); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      run(latency_batch);
      const auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    report.latency_ms = ms.size() % 2 ? ms[ms.size() / 2]
                                      : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  }
  return report;
}

namespace {

cv::Mat single_channel_mat(const Tensor<float>& plane, std::size_t h, std::size_t w) {
  cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_32F);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      m.at<float>(static_cast<int>(y), static_cast<int>(x)) = plane[y * w + x];
    }
  }
  return m;
}

}  // namespace

Saliency saliency_map(CmnetModel<float>& model, const Image& image, std::size_t target_class,
                      const TrainConfig& config) {
  const std::size_t k = model.config().num_classes;
  if (target_class >= k) {
    throw EvaluationError("target class " + std::to_string(target_class) + " outside [0, " +
                          std::to_string(k) + ")");
  }
  const std::size_t size = model.config().input_size;
  PreparedSet set;
  set.images.push_back(preprocess(image, size, config.grayscale_expand, config.norm));
  set.labels.push_back(target_class);
  set.num_classes = k;

  const bool was_training = model.training();
  model.set_training(false);
  auto batch = make_batch<float>(set, {0}, model.config().mirror_right);
  ForwardPass<float> pass = model.forward(batch.whole, batch.left, batch.right);
  Var<float> features = pass.sfirm.refined;
  features.retain_grad();
  // Score is the raw target logit: a constant shift of all logits leaves every
  // gradient below unchanged.
  Tensor<float> seed(pass.logits.shape(), 0.0f);
  seed[target_class] = 1.0f;
  backward(pass.logits, seed);
  for (const auto& p : model.registry().parameters()) {
    Var<float> v = p.var;
    v.zero_grad();
  }
  model.set_training(was_training);

  const Tensor<float>& a = features.value();
  const std::size_t c = a.dim(1), h = a.dim(2), w = a.dim(3), hw = h * w;
  Tensor<float> cam({h, w}, 0.0f);
  Saliency out;
  out.heatmap = Image(image.height, image.width, 1, 0.0f);

  const Tensor<float>& g = features.grad();
  bool any_grad = false;
  if (!g.empty()) {
    for (std::size_t i = 0; i < g.numel(); ++i) any_grad |= g[i] != 0.0f;
  }
  if (any_grad) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* ac = a.data() + ch * hw;
      const float* gc = g.data() + ch * hw;
      double sum_a = 0.0;
      for (std::size_t i = 0; i < hw; ++i) sum_a += ac[i];
      double weight = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double g1 = gc[i], g2 = g1 * g1, g3 = g2 * g1;
        const double denom = 2.0 * g2 + sum_a * g3;
        const double alpha = denom != 0.0 ? g2 / denom : 0.0;
        weight += alpha * std::max(g1, 0.0);
      }
      for (std::size_t i = 0; i < hw; ++i) cam[i] += static_cast<float>(weight * ac[i]);
    }
    for (std::size_t i = 0; i < hw; ++i) cam[i] = std::max(cam[i], 0.0f);
  }

  cv::Mat up;
  cv::resize(single_channel_mat(cam, h, w), up,
             cv::Size(static_cast<int>(image.width), static_cast<int>(image.height)), 0, 0,
             cv::INTER_LINEAR);
  double lo = 0.0, hi = 0.0;
  cv::minMaxLoc(up, &lo, &hi);
  if (!any_grad || !(hi - lo > 1e-12) || !std::isfinite(hi - lo)) {
    spdlog::warn("saliency map for class {} is degenerate; returning a flat zero map",
                 target_class);
    out.degenerate = true;
    return out;
  }
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double v = (up.at<float>(static_cast<int>(y), static_cast<int>(x)) - lo) / (hi - lo);
      out.heatmap.at(y, x, 0) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

Saliency saliency_map(const Checkpoint& checkpoint, const Image& image, std::size_t target_class) {
  auto model = restore_model(checkpoint);
  return saliency_map(*model, image, target_class, checkpoint.config);
}

void write_confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                         const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto name = [&](std::size_t i) {
    return i < class_names.size() && !class_names[i].empty() ? class_names[i]
                                                             : "class" + std::to_string(i);
  };
  out << "true\\pred";
  for (std::size_t c = 0; c < cm.classes(); ++c) out << ',' << name(c);
  out << '\n';
  for (std::size_t r = 0; r < cm.classes(); ++r) {
    out << name(r);
    for (auto v : cm.counts[r]) out << ',' << v;
    out << '\n';
  }
  out << "\nnormalized";
  for (std::size_t c = 0; c < cm.classes(); ++c) out << ',' << name(c);
  out << '\n' << std::setprecision(6) << std::fixed;
  for (std::size_t r = 0; r < cm.classes(); ++r) {
    out << name(r);
    for (double v : cm.normalized[r]) out << ',' << v;
    out << '\n';
  }
}

void render_confusion_png(const ConfusionMatrix& cm, const fs::path& path) {
  const int cell = 48, k = static_cast<int>(cm.classes());
  cv::Mat grey(k * cell, k * cell, CV_8U);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      const auto v = static_cast<std::uint8_t>(std::lround(255.0 * cm.normalized[r][c]));
      grey(cv::Rect(c * cell, r * cell, cell, cell)).setTo(v);
    }
  }
  cv::Mat colour;
  cv::applyColorMap(grey, colour, cv::COLORMAP_VIRIDIS);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      char text[16];
      std::snprintf(text, sizeof text, "%.2f", cm.normalized[r][c]);
      const cv::Scalar ink = cm.normalized[r][c] > 0.5 ? cv::Scalar(0, 0, 0)
                                                       : cv::Scalar(255, 255, 255);
      cv::putText(colour, text, cv::Point(c * cell + 4, r * cell + cell / 2 + 5),
                  cv::FONT_HERSHEY_SIMPLEX, 0.4, ink, 1, cv::LINE_AA);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), colour)) throw IoError("cannot write " + path.string());
}

void render_saliency_png(const Image& image, const Image& heatmap, const fs::path& path) {
  if (heatmap.height != image.height || heatmap.width != image.width) {
    throw InputError("render_saliency_png: heatmap and image sizes differ");
  }
  cv::Mat grey(static_cast<int>(image.height), static_cast<int>(image.width), CV_8U);
  cv::Mat base(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const int iy = static_cast<int>(y), ix = static_cast<int>(x);
      grey.at<std::uint8_t>(iy, ix) = static_cast<std::uint8_t>(
          std::lround(255.0 * std::clamp(heatmap.at(y, x, 0), 0.0f, 1.0f)));
      cv::Vec3b& px = base.at<cv::Vec3b>(iy, ix);
      for (int c = 0; c < 3; ++c) {
        const std::size_t src = image.channels == 1 ? 0 : static_cast<std::size_t>(2 - c);
        px[c] = static_cast<std::uint8_t>(
            std::lround(255.0 * std::clamp(image.at(y, x, src), 0.0f, 1.0f)));
      }
    }
  }
  cv::Mat jet, blended;
  cv::applyColorMap(grey, jet, cv::COLORMAP_JET);
  cv::addWeighted(base, 0.5, jet, 0.5, 0.0, blended);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), blended)) throw IoError("cannot write " + path.string());
}

}  // namespace cmnet
