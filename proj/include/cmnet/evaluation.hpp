#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmnet/engine.hpp"

namespace cmnet {

// Rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::vector<std::vector<std::uint64_t>> counts;
  std::vector<std::vector<double>> normalized;  // rows with no samples stay zero

  std::size_t classes() const noexcept { return counts.size(); }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  double accuracy() const;
};

ConfusionMatrix confusion_matrix(const Labels& truth, const std::vector<std::size_t>& predicted,
                                 std::size_t num_classes);

struct EvalResult {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;
};

// Inference-mode evaluation; preprocessing follows `config` (size from the
// model). Throws EvaluationError when the head and dataset class counts differ.
EvalResult evaluate(CmnetModel<float>& model, const Dataset& dataset, const TrainConfig& config);
EvalResult evaluate(const Checkpoint& checkpoint, const Dataset& dataset);

// label_map: foreign label -> model class. It must cover every foreign label
// that occurs and be injective. Grey inputs are expanded to three channels.
using LabelMap = std::map<std::size_t, std::size_t>;
EvalResult cross_evaluate(CmnetModel<float>& model, const Dataset& foreign,
                          const LabelMap& label_map, const TrainConfig& config);
// Parses "0:3,1:5" style maps.
LabelMap parse_label_map(const std::string& text);

struct AblationRow {
  char row = 'h';
  std::string description;
  std::size_t parameters = 0;
  double train_acc = 0.0;
  double accuracy = 0.0;
};

// "a..i", "a-c", "a,c,h" or "abc".
std::vector<char> parse_rows(const std::string& text);
std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<char>& rows,
                                      const Dataset& train_set, const Dataset& test_set);

struct ComplexityReport {
  std::size_t input_size = 0;
  std::size_t parameter_count = 0;
  std::uint64_t flops = 0;  // 2 x multiply-accumulates, batch 1
  std::optional<double> latency_ms;
  std::size_t latency_batch = 32;
};

// FLOPs from one batch-1 forward pass. Latency, when requested, is the
// median of `timed` batches after `warmup` untimed ones.
ComplexityReport profile(const ModelConfig& config, std::size_t input_size, bool measure_latency,
                         std::size_t timed = 5, std::size_t warmup = 2,
                         std::size_t latency_batch = 32);

struct Saliency {
  Image heatmap;  // H x W x 1, values in [0, 1]
  bool degenerate = false;
};

// Grad-CAM++ on the refinement output for the target logit. `image` is raw
// (values in [0, 1]); the map is returned at the image's own resolution.
Saliency saliency_map(CmnetModel<float>& model, const Image& image, std::size_t target_class,
                      const TrainConfig& config);
Saliency saliency_map(const Checkpoint& checkpoint, const Image& image, std::size_t target_class);

void write_confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                         const std::filesystem::path& path);
void render_confusion_png(const ConfusionMatrix& cm, const std::filesystem::path& path);
// Heatmap in a jet palette blended over the image.
void render_saliency_png(const Image& image, const Image& heatmap,
                         const std::filesystem::path& path);

}  // namespace cmnet
