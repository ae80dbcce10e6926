#include "cmnet/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "cmnet/config.hpp"
#include "cmnet/errors.hpp"
#include "cmnet/evaluation.hpp"
#include "cmnet/serialization.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cmnet {

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::string log_level = "info";
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("error while writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path resolve_output(const Common& common, const std::string& subcommand) {
  if (!common.output_dir.empty()) return common.output_dir;
  const char* root = std::getenv("CMNET_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / subcommand;
}

void setup_logging(const fs::path& dir, const std::string& level) {
  fs::create_directories(dir);
  auto console = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((dir / "run.log").string(), true);
  auto logger = std::make_shared<spdlog::logger>("cmnet", spdlog::sinks_init_list{console, file});
  logger->set_level(spdlog::level::from_str(level));
  logger->flush_on(spdlog::level::info);
  spdlog::set_default_logger(logger);
}

RunConfig load_config(const Common& common) {
  RunConfig config = common.config_path.empty() ? RunConfig{} : load_run_config(common.config_path);
  apply_overrides(config, common.overrides);
  return config;
}

void echo_config(const fs::path& dir, const RunConfig& config) {
  write_text(dir / "effective_config.ini", render_ini(config));
}

std::uint64_t derived_seed(std::uint64_t seed, const std::string& tag) {
  return Rng(seed).fork(tag).engine()();
}

struct Splits {
  Dataset train, val, test;
};

Splits load_data(const RunConfig& config, bool need_train) {
  Splits s;
  const DataConfig& d = config.data;
  const std::uint64_t seed = config.train.seed;
  if (d.source == "synthetic") {
    s.train = synth_generate(derived_seed(seed, "data/train"), d.synth_per_class, d.synth_classes,
                             d.synth_asymmetry, d.synth_size);
    if (d.synth_val_per_class > 0) {
      s.val = synth_generate(derived_seed(seed, "data/val"), d.synth_val_per_class,
                             d.synth_classes, d.synth_asymmetry, d.synth_size);
      s.val.split = SplitTag::val;
    }
    const std::size_t n_test = d.synth_val_per_class > 0 ? d.synth_val_per_class
                                                         : d.synth_per_class;
    s.test = synth_generate(derived_seed(seed, "data/test"), n_test, d.synth_classes,
                            d.synth_asymmetry, d.synth_size);
    s.test.split = SplitTag::test;
    return s;
  }
  if (need_train) {
    if (d.train_dir.empty()) throw ConfigError("data.train_dir is required for data.source=folder");
    s.train = ingest_folder(d.train_dir, SplitTag::train).dataset;
  }
  if (!d.val_dir.empty()) s.val = ingest_folder(d.val_dir, SplitTag::val).dataset;
  if (!d.test_dir.empty()) s.test = ingest_folder(d.test_dir, SplitTag::test).dataset;
  return s;
}

// The head follows the training data; a configured count that disagrees is
// overridden with a log line so the echoed config states what actually ran.
void sync_classes(RunConfig& config, const Dataset& train) {
  if (train.num_classes() != config.train.model.num_classes) {
    spdlog::info("setting model.num_classes to {} to match the training data",
                 train.num_classes());
    config.train.model.num_classes = train.num_classes();
  }
}

json confusion_json(const ConfusionMatrix& cm) {
  return {{"counts", cm.counts}, {"normalized", cm.normalized}};
}

json history_rows(const History& h) {
  json arr = json::array();
  for (const auto& r : h) {
    arr.push_back({{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"l_sl", r.l_sl},
                   {"l_gl", r.l_gl},
                   {"train_acc", r.train_acc},
                   {"val_acc", r.val_acc ? json(*r.val_acc) : json(nullptr)}});
  }
  return arr;
}

std::unique_ptr<CmnetModel<float>> fresh_model(const RunConfig& config) {
  auto model = build_model(config.train);
  if (!config.pretrained.empty()) {
    const std::size_t copied = model->load_pretrained(load_tensor_table(config.pretrained));
    spdlog::info("copied {} pretrained tensors from {}", copied, config.pretrained);
  }
  return model;
}

void write_eval(const fs::path& dir, const EvalResult& r, const std::vector<std::string>& names,
                json extra) {
  write_confusion_csv(r.confusion, names, dir / "confusion.csv");
  render_confusion_png(r.confusion, dir / "confusion.png");
  extra["accuracy"] = r.accuracy;
  extra["samples"] = r.predictions.size();
  extra["confusion"] = confusion_json(r.confusion);
  write_json(dir / "metrics.json", extra);
}

Dataset single_image_set(const fs::path& path) {
  auto img = read_image(path);
  if (!img) throw InputError("cannot decode image " + path.string());
  Dataset ds;
  ds.samples.push_back({std::move(*img), 0, path.string()});
  ds.class_names = {"input"};
  return ds;
}

// --- subcommands -------------------------------------------------------------

struct TrainOpts {
  std::string finetune;
};

int cmd_train(const Common& common, const TrainOpts& opts, const fs::path& dir) {
  RunConfig config = load_config(common);
  Splits data = load_data(config, true);
  sync_classes(config, data.train);
  config.train.validate();
  echo_config(dir, config);

  std::unique_ptr<CmnetModel<float>> model;
  if (!opts.finetune.empty()) {
    const Checkpoint base = load_checkpoint(opts.finetune);
    model = restore_for_finetune(base, config.train.model.num_classes, config.train.seed);
    spdlog::info("fine-tuning from {}", opts.finetune);
  } else {
    model = fresh_model(config);
  }
  const Dataset* val = data.val.samples.empty() ? nullptr : &data.val;
  const History history = train(*model, data.train, val, config.train);
  write_history_csv(history, dir / "history.csv");
  const Checkpoint ck = make_checkpoint(*model, config.train, history);
  save_checkpoint(dir / "checkpoint.cmnt", ck);

  json metrics = {{"epochs", history.size()},
                  {"parameters", model->parameter_count()},
                  {"history", history_rows(history)}};
  if (!history.empty()) {
    metrics["final_train_acc"] = history.back().train_acc;
    metrics["final_val_acc"] = history.back().val_acc ? json(*history.back().val_acc) : json(nullptr);
  }
  write_json(dir / "metrics.json", metrics);
  return 0;
}

struct EvalOpts {
  std::string checkpoint;
  std::string data_dir;
  std::string label_map;
};

Dataset eval_dataset(const RunConfig& config, const std::string& data_dir) {
  if (!data_dir.empty()) return ingest_folder(data_dir, SplitTag::test).dataset;
  Splits s = load_data(config, false);
  if (s.test.samples.empty()) {
    throw ConfigError("no evaluation data: pass --data or set data.test_dir");
  }
  return s.test;
}

int cmd_evaluate(const Common& common, const EvalOpts& opts, const fs::path& dir) {
  RunConfig config = load_config(common);
  const Checkpoint ck = load_checkpoint(opts.checkpoint);
  // Architecture and normalisation come from the checkpoint; the config only
  // selects data.
  config.train.model = ck.config.model;
  echo_config(dir, config);
  const Dataset ds = eval_dataset(config, opts.data_dir);
  auto model = restore_model(ck);
  TrainConfig tc = ck.config;
  tc.grayscale_expand = config.train.grayscale_expand;
  const EvalResult r = evaluate(*model, ds, tc);
  write_eval(dir, r, ds.class_names, {{"checkpoint_epoch", ck.epoch}});
  spdlog::info("accuracy {:.4f} on {} samples", r.accuracy, r.predictions.size());
  return 0;
}

int cmd_cross_evaluate(const Common& common, const EvalOpts& opts, const fs::path& dir) {
  RunConfig config = load_config(common);
  const Checkpoint ck = load_checkpoint(opts.checkpoint);
  config.train.model = ck.config.model;
  echo_config(dir, config);
  const Dataset foreign = eval_dataset(config, opts.data_dir);
  LabelMap map;
  if (opts.label_map.empty()) {
    for (std::size_t i = 0; i < foreign.num_classes(); ++i) map[i] = i;
  } else {
    map = parse_label_map(opts.label_map);
  }
  auto model = restore_model(ck);
  const TrainConfig& tc = ck.config;
  const EvalResult r = cross_evaluate(*model, foreign, map, tc);
  json mapping = json::object();
  for (const auto& [from, to] : map) mapping[std::to_string(from)] = to;
  std::vector<std::string> names(ck.config.model.num_classes);
  write_eval(dir, r, names, {{"checkpoint_epoch", ck.epoch}, {"label_map", mapping}});
  spdlog::info("cross accuracy {:.4f} on {} samples", r.accuracy, r.predictions.size());
  return 0;
}

int cmd_ablate(const Common& common, const std::string& rows_text, const fs::path& dir) {
  RunConfig config = load_config(common);
  const std::vector<char> rows = parse_rows(rows_text);
  Splits data = load_data(config, true);
  sync_classes(config, data.train);
  config.train.validate();
  echo_config(dir, config);
  const Dataset& test = data.test.samples.empty() ? data.train : data.test;
  const auto table = ablation_run(config.train, rows, data.train, test);

  std::ostringstream csv;
  csv << "row,description,parameters,train_acc,accuracy\n" << std::setprecision(9);
  json arr = json::array();
  for (const auto& r : table) {
    csv << r.row << ',' << r.description << ',' << r.parameters << ',' << r.train_acc << ','
        << r.accuracy << '\n';
    arr.push_back({{"row", std::string(1, r.row)},
                   {"description", r.description},
                   {"parameters", r.parameters},
                   {"train_acc", r.train_acc},
                   {"accuracy", r.accuracy}});
  }
  write_text(dir / "ablation.csv", csv.str());
  write_json(dir / "metrics.json", {{"rows", arr}});
  return 0;
}

struct ProfileOpts {
  std::vector<std::size_t> sizes{224};
  bool latency = false;
};

int cmd_profile(const Common& common, const ProfileOpts& opts, const fs::path& dir) {
  RunConfig config = load_config(common);
  config.train.validate();
  echo_config(dir, config);
  const ModelConfig model = config.train.effective_model();
  std::ostringstream csv;
  csv << "input_size,parameters,flops\n";
  json arr = json::array(), latency = json::array();
  for (std::size_t size : opts.sizes) {
    const ComplexityReport r = profile(model, size, opts.latency);
    csv << r.input_size << ',' << r.parameter_count << ',' << r.flops << '\n';
    arr.push_back({{"input_size", r.input_size},
                   {"parameters", r.parameter_count},
                   {"flops", r.flops},
                   {"gflops", static_cast<double>(r.flops) / 1e9}});
    spdlog::info("input {}: {} parameters, {:.3f} GFLOPs", size, r.parameter_count,
                 static_cast<double>(r.flops) / 1e9);
    if (r.latency_ms) {
      latency.push_back({{"input_size", size}, {"batch", r.latency_batch},
                         {"median_ms", *r.latency_ms}});
    }
  }
  write_text(dir / "complexity.csv", csv.str());
  write_json(dir / "metrics.json", {{"profiles", arr}, {"flops_convention", "2 x MAC"}});
  // Wall time depends on the host, so it is kept out of the metric files.
  if (opts.latency) write_json(dir / "latency.json", {{"latency", latency}});
  return 0;
}

struct SaliencyOpts {
  std::string checkpoint;
  std::string image;
  std::optional<std::size_t> target;
};

int cmd_saliency(const Common& common, const SaliencyOpts& opts, const fs::path& dir) {
  RunConfig config = load_config(common);
  const Checkpoint ck = load_checkpoint(opts.checkpoint);
  config.train.model = ck.config.model;
  echo_config(dir, config);
  const Dataset one = single_image_set(opts.image);
  const Image& img = one.samples.front().image;
  auto model = restore_model(ck);
  TrainConfig tc = ck.config;
  tc.grayscale_expand = true;
  std::size_t target = 0;
  if (opts.target) {
    target = *opts.target;
  } else {
    PreparedSet set = prepare(one, tc);
    target = argmax_rows(predict_logits(*model, set, 1)).front();
  }
  const Saliency s = saliency_map(*model, img, target, tc);
  write_image(dir / "heatmap.png", s.heatmap);
  render_saliency_png(img, s.heatmap, dir / "overlay.png");
  double mass = 0.0;
  for (float v : s.heatmap.pixels) mass += v;
  write_json(dir / "metrics.json", {{"target_class", target},
                                    {"degenerate", s.degenerate},
                                    {"height", s.heatmap.height},
                                    {"width", s.heatmap.width},
                                    {"mean", mass / static_cast<double>(s.heatmap.pixels.size())}});
  return 0;
}

struct SynthOpts {
  std::uint64_t seed = 0;
  std::size_t classes = 2;
  std::size_t n = 32;
  double asymmetry = 0.0;
  std::size_t size = 64;
  bool quadrant = false;
};

int cmd_synth(const Common& common, const SynthOpts& o, const fs::path& dir) {
  RunConfig config = load_config(common);
  config.data.source = "synthetic";
  config.data.synth_classes = o.classes;
  config.data.synth_per_class = o.n;
  config.data.synth_asymmetry = o.asymmetry;
  config.data.synth_size = o.size;
  config.train.seed = o.seed;
  echo_config(dir, config);
  Dataset ds;
  json extra = json::object();
  if (o.quadrant) {
    QuadrantDataset q = synth_quadrant(o.seed, o.n, o.size);
    ds = std::move(q.dataset);
    extra["quadrants"] = q.quadrant;
  } else {
    ds = synth_generate(o.seed, o.n, o.classes, o.asymmetry, o.size);
  }
  export_dataset(ds, dir / "images");
  fs::copy_file(dir / "images" / "manifest.csv", dir / "manifest.csv",
                fs::copy_options::overwrite_existing);
  extra["samples"] = ds.size();
  extra["classes"] = ds.class_names;
  extra["class_counts"] = ds.class_counts();
  write_json(dir / "metrics.json", extra);
  spdlog::info("wrote {} images to {}", ds.size(), (dir / "images").string());
  return 0;
}

int cmd_split_preview(const Common& common, const std::string& image, bool mirror,
                      const fs::path& dir) {
  RunConfig config = load_config(common);
  echo_config(dir, config);
  const Dataset one = single_image_set(image);
  const Image& img = one.samples.front().image;
  const FaceTriplet t = make_triplet(img, mirror || config.train.model.mirror_right);
  write_image(dir / "whole.png", t.whole);
  write_image(dir / "left.png", t.left);
  write_image(dir / "right.png", t.right);
  write_json(dir / "metrics.json", {{"height", img.height},
                                    {"width", img.width},
                                    {"left_width", t.left.width},
                                    {"right_width", t.right.width},
                                    {"mirrored", mirror || config.train.model.mirror_right}});
  return 0;
}

int cmd_alpha_sweep(const Common& common, const fs::path& dir) {
  RunConfig config = load_config(common);
  Splits data = load_data(config, true);
  sync_classes(config, data.train);
  config.train.validate();
  echo_config(dir, config);
  const Dataset& test = data.test.samples.empty() ? data.train : data.test;
  std::ostringstream csv;
  csv << "alpha,final_loss,l_sl,l_gl,train_acc,accuracy\n" << std::setprecision(9);
  json arr = json::array();
  for (int i = 0; i <= 10; ++i) {
    TrainConfig tc = config.train;
    tc.model.alpha = static_cast<double>(i) / 10.0;
    auto model = fresh_model(RunConfig{tc, config.data, config.pretrained});
    const History h = train(*model, data.train, nullptr, tc);
    const double acc = evaluate(*model, test, tc).accuracy;
    const EpochRecord last = h.empty() ? EpochRecord{} : h.back();
    csv << format_number(tc.model.alpha) << ',' << last.train_loss << ',' << last.l_sl << ','
        << last.l_gl << ',' << last.train_acc << ',' << acc << '\n';
    arr.push_back({{"alpha", tc.model.alpha},
                   {"final_loss", last.train_loss},
                   {"l_sl", last.l_sl},
                   {"l_gl", last.l_gl},
                   {"train_acc", last.train_acc},
                   {"accuracy", acc}});
    spdlog::info("alpha {} accuracy {:.4f}", tc.model.alpha, acc);
  }
  write_text(dir / "alpha_sweep.csv", csv.str());
  write_json(dir / "metrics.json", {{"sweep", arr}});
  return 0;
}

void write_error(const fs::path& dir, const std::string& kind, const std::string& message,
                 int code) {
  try {
    write_json(dir / "error.json", {{"kind", kind}, {"message", message}, {"exit_code", code}});
  } catch (...) {
    // nowhere to record it; stderr already has the message
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Cross-modal facial expression network: train, evaluate and inspect"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", common.overrides, "override, section.key=value (repeatable)");
    sub->add_option("-o,--output-dir", common.output_dir,
                    "output directory (default $CMNET_OUTPUT_ROOT/<subcommand>)");
    sub->add_option("--log-level", common.log_level, "trace|debug|info|warn|error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  };

  TrainOpts train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd);
  train_cmd->add_option("--finetune", train_opts.finetune, "start from this checkpoint");

  EvalOpts eval_opts;
  auto* eval_cmd = app.add_subcommand("evaluate", "accuracy and confusion matrix");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint)->required();
  eval_cmd->add_option("--data", eval_opts.data_dir, "class-per-directory image folder");

  auto* cross_cmd = app.add_subcommand("cross-evaluate", "evaluate on a foreign label space");
  add_common(cross_cmd);
  cross_cmd->add_option("--checkpoint", eval_opts.checkpoint)->required();
  cross_cmd->add_option("--data", eval_opts.data_dir, "class-per-directory image folder");
  cross_cmd->add_option("--label-map", eval_opts.label_map, "foreign:model pairs, e.g. 0:3,1:5");

  std::string rows = "a..i";
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate ablation rows");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--rows", rows, "rows, e.g. a..i or a,c,h");

  ProfileOpts profile_opts;
  auto* profile_cmd = app.add_subcommand("profile", "parameter and FLOP counts");
  add_common(profile_cmd);
  profile_cmd->add_option("--input-size", profile_opts.sizes, "input side length (repeatable)");
  profile_cmd->add_flag("--latency", profile_opts.latency, "also time batches of 32");

  SaliencyOpts sal_opts;
  std::size_t target = 0;
  auto* sal_cmd = app.add_subcommand("saliency", "Grad-CAM++ heatmap for one image");
  add_common(sal_cmd);
  sal_cmd->add_option("--checkpoint", sal_opts.checkpoint)->required();
  sal_cmd->add_option("--image", sal_opts.image)->required()->check(CLI::ExistingFile);
  auto* target_opt = sal_cmd->add_option("--class", target, "target class (default: predicted)");

  SynthOpts synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "write a synthetic dataset");
  add_common(synth_cmd);
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--classes", synth.classes);
  synth_cmd->add_option("--n", synth.n, "images per class");
  synth_cmd->add_option("--asymmetry", synth.asymmetry)->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--size", synth.size);
  synth_cmd->add_flag("--quadrant", synth.quadrant, "stripe patch in one quadrant, 2 classes");

  std::string preview_image;
  bool preview_mirror = false;
  auto* split_cmd = app.add_subcommand("split-preview", "write the two half-face crops");
  add_common(split_cmd);
  split_cmd->add_option("--image", preview_image)->required()->check(CLI::ExistingFile);
  split_cmd->add_flag("--mirror", preview_mirror, "mirror the right half");

  auto* sweep_cmd = app.add_subcommand("alpha-sweep", "train once per alpha in 0, 0.1, ..., 1");
  add_common(sweep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  fs::path dir;
  try {
    dir = resolve_output(common, name);
    setup_logging(dir, common.log_level);
    fs::remove(dir / "error.json");
  } catch (const std::exception& e) {
    std::cerr << "error: cannot prepare output directory: " << e.what() << '\n';
    return 1;
  }

  try {
    if (name == "train") return cmd_train(common, train_opts, dir);
    if (name == "evaluate") return cmd_evaluate(common, eval_opts, dir);
    if (name == "cross-evaluate") return cmd_cross_evaluate(common, eval_opts, dir);
    if (name == "ablate") return cmd_ablate(common, rows, dir);
    if (name == "profile") return cmd_profile(common, profile_opts, dir);
    if (name == "saliency") {
      if (target_opt->count() > 0) sal_opts.target = target;
      return cmd_saliency(common, sal_opts, dir);
    }
    if (name == "synth-data") return cmd_synth(common, synth, dir);
    if (name == "split-preview") return cmd_split_preview(common, preview_image, preview_mirror, dir);
    if (name == "alpha-sweep") return cmd_alpha_sweep(common, dir);
    throw ConfigError("unknown subcommand " + name);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    write_error(dir, e.kind(), e.what(), 2);
    return 2;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    write_error(dir, e.kind(), e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    write_error(dir, "runtime", e.what(), 1);
    return 1;
  }
}

}  // namespace cmnet
