#include "cmnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "cmnet/errors.hpp"
#include "cmnet/rng.hpp"

namespace fs = std::filesystem;

namespace cmnet {

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& s : samples) ++counts.at(s.label);
  return counts;
}

std::optional<Image> read_image(const fs::path& path) {
  cv::Mat raw;
  try {
    raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (raw.empty() || raw.cols == 0 || raw.rows == 0) return std::nullopt;

  double scale = 1.0;
  switch (raw.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: break;
    default: return std::nullopt;
  }
  cv::Mat rgb;
  switch (raw.channels()) {
    case 1: rgb = raw; break;
    case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
    default: return std::nullopt;
  }
  cv::Mat f;
  rgb.convertTo(f, CV_32F, scale);
  Image img(static_cast<std::size_t>(f.rows), static_cast<std::size_t>(f.cols),
            static_cast<std::size_t>(f.channels()));
  const std::size_t row_len = img.width * img.channels;
  for (int y = 0; y < f.rows; ++y) {
    const float* src = f.ptr<float>(y);
    std::copy(src, src + row_len, img.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_len));
  }
  return img;
}

namespace {

cv::Mat to_mat(const Image& image) {
  const int type = CV_32FC(static_cast<int>(image.channels));
  cv::Mat m(static_cast<int>(image.height), static_cast<int>(image.width), type);
  const std::size_t row_len = image.width * image.channels;
  for (std::size_t y = 0; y < image.height; ++y) {
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_len), row_len,
                m.ptr<float>(static_cast<int>(y)));
  }
  return m;
}

Image from_mat(const cv::Mat& m) {
  Image img(static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols),
            static_cast<std::size_t>(m.channels()));
  const std::size_t row_len = img.width * img.channels;
  for (int y = 0; y < m.rows; ++y) {
    const float* src = m.ptr<float>(y);
    std::copy(src, src + row_len, img.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_len));
  }
  return img;
}

}  // namespace

void write_image(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw IoError("write_image: unsupported channel count " + std::to_string(image.channels));
  }
  cv::Mat f = to_mat(image);
  cv::Mat bytes;
  f.convertTo(bytes, CV_8U, 255.0);  // saturating
  if (image.channels == 3) cv::cvtColor(bytes, bytes, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bytes)) throw IoError("cannot write image " + path.string());
}

IngestResult ingest_folder(const fs::path& root, SplitTag split) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw IngestionError("dataset root '" + root.string() + "' is not a directory");
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) {
    throw IngestionError("dataset root '" + root.string() + "' has no class directories");
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  IngestResult result;
  result.dataset.split = split;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const fs::path& dir = class_dirs[label];
    result.dataset.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto& file : files) {
      auto img = read_image(file);
      if (!img) {
        spdlog::warn("skipping undecodable file {}", file.string());
        result.skipped_files.push_back(file.string());
        continue;
      }
      result.dataset.samples.push_back({std::move(*img), label, file.string()});
      ++kept;
    }
    if (kept == 0) {
      spdlog::warn("class directory {} holds no decodable images", dir.string());
      result.empty_classes.push_back(dir.filename().string());
    }
  }
  return result;
}

Image preprocess(const Image& image, std::size_t size, bool grayscale_expand,
                 const Normalization& norm) {
  if (image.height == 0 || image.width == 0) throw InputError("preprocess: zero-area image");
  if (size < 32) throw ConfigError("preprocess: target size must be at least 32");
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw InputError("preprocess: pixel buffer does not match its dimensions");
  }
  Image rgb;
  if (image.channels == 1) {
    if (!grayscale_expand) {
      throw InputError("preprocess: single-channel image needs grayscale_expand");
    }
    rgb = Image(image.height, image.width, 3);
    for (std::size_t i = 0; i < image.height * image.width; ++i) {
      rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = image.pixels[i];
    }
  } else if (image.channels == 3) {
    rgb = image;
  } else {
    throw InputError("preprocess: expected 1 or 3 channels, got " +
                     std::to_string(image.channels));
  }

  Image out;
  if (rgb.height == size && rgb.width == size) {
    out = std::move(rgb);
  } else {
    cv::Mat dst;
    cv::resize(to_mat(rgb), dst, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0,
               cv::INTER_LINEAR);
    out = from_mat(dst);
  }
  for (std::size_t i = 0; i < out.height * out.width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      float& v = out.pixels[3 * i + c];
      v = (v - norm.mean[c]) / norm.stddev[c];
    }
  }
  return out;
}

namespace {

struct ClassLayout {
  double blob_y, blob_x, blob_r;  // fractions of the side length
  double stripe_freq, stripe_phase;
  double tint[3];
};

// Layouts depend on the class index only, so datasets drawn with different
// seeds share their classes.
ClassLayout class_layout(std::size_t k, std::size_t num_classes) {
  ClassLayout l{};
  const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(num_classes);
  l.blob_y = 0.2 + 0.6 * t;
  l.blob_x = 0.12 + 0.22 * std::fmod(0.618 * static_cast<double>(k), 1.0);
  l.blob_r = 0.07 + 0.05 * static_cast<double>(k % 3) / 2.0;
  l.stripe_freq = 2.0 + static_cast<double>(k % 4);
  l.stripe_phase = std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes);
  const double hue = 2.0 * std::numbers::pi * t;
  for (int c = 0; c < 3; ++c) {
    l.tint[c] = 0.65 + 0.3 * std::cos(hue - 2.0 * std::numbers::pi * c / 3.0);
  }
  return l;
}

}  // namespace

Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class, std::size_t num_classes,
                       double asymmetry, std::size_t size) {
  if (num_classes < 2) throw ConfigError("synth_generate needs at least 2 classes");
  if (!(asymmetry >= 0.0 && asymmetry <= 1.0)) {
    throw ConfigError("synth_generate: asymmetry must lie in [0, 1]");
  }
  if (size < 2) throw ConfigError("synth_generate: size must be at least 2");
  Dataset ds;
  ds.split = SplitTag::train;
  for (std::size_t k = 0; k < num_classes; ++k) ds.class_names.push_back("class" + std::to_string(k));

  Rng rng(seed);
  const double s = static_cast<double>(size);
  const std::size_t folded = (size + 1) / 2;
  const std::size_t right_start = size / 2;

  for (std::size_t k = 0; k < num_classes; ++k) {
    const ClassLayout layout = class_layout(k, num_classes);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const double cy = (layout.blob_y + rng.uniform(-0.03, 0.03)) * s;
      const double cx = (layout.blob_x + rng.uniform(-0.03, 0.03)) * s;
      const double r = layout.blob_r * s * rng.uniform(0.9, 1.1);
      const double gain = rng.uniform(0.9, 1.1);
      const double phase = layout.stripe_phase + rng.uniform(-0.2, 0.2);
      std::vector<float> noise(size * folded * 3);
      for (float& v : noise) v = static_cast<float>(rng.normal(0.0, 0.03));

      Image img(size, size, 3);
      for (std::size_t y = 0; y < size; ++y) {
        const double yy = static_cast<double>(y) + 0.5;
        const double stripe =
            0.12 * std::sin(2.0 * std::numbers::pi * layout.stripe_freq * yy / s + phase);
        for (std::size_t x = 0; x < size; ++x) {
          const std::size_t xf = std::min(x, size - 1 - x);  // fold about the midline
          const double xx = static_cast<double>(xf) + 0.5;
          const double d2 = (yy - cy) * (yy - cy) + (xx - cx) * (xx - cx);
          const double blob = std::exp(-d2 / (2.0 * r * r));
          for (std::size_t c = 0; c < 3; ++c) {
            double v = 0.3 + stripe + 0.6 * gain * blob * layout.tint[c];
            v += noise[(y * folded + xf) * 3 + c];
            img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      if (asymmetry > 0.0) {
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = right_start; x < size; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
              const double v = img.at(y, x, c) + asymmetry * rng.uniform(-0.5, 0.5);
              img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
          }
        }
      }
      ds.samples.push_back(
          {std::move(img), k, "synth/" + ds.class_names[k] + "/" + std::to_string(i)});
    }
  }
  return ds;
}

QuadrantDataset synth_quadrant(std::uint64_t seed, std::size_t n_per_class, std::size_t size) {
  if (size < 16) throw ConfigError("synth_quadrant: size must be at least 16");
  QuadrantDataset out;
  out.dataset.class_names = {"horizontal", "vertical"};
  Rng rng(seed);
  const std::size_t half = size / 2;
  const std::size_t margin = std::max<std::size_t>(1, size / 16);
  const std::size_t period = std::max<std::size_t>(2, size / 16);

  // Interleave the classes so any prefix is balanced.
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    const std::size_t label = i % 2;
    const std::size_t q = rng.index(4);
    Image img(size, size, 3);
    for (float& v : img.pixels) v = static_cast<float>(0.5 + rng.uniform(-0.05, 0.05));
    const std::size_t y0 = (q / 2) * half + margin, y1 = (q / 2 + 1) * half - margin;
    const std::size_t x0 = (q % 2) * half + margin, x1 = (q % 2 + 1) * half - margin;
    const std::size_t offset = rng.index(period * 2);
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        const std::size_t coord = (label == 0 ? y : x) + offset;
        const float v = (coord / period) % 2 == 0 ? 0.9f : 0.1f;
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = v;
      }
    }
    out.dataset.samples.push_back(
        {std::move(img), label, "quadrant/" + std::to_string(i)});
    out.quadrant.push_back(q);
  }
  return out;
}

std::string to_string(SamplingPolicy policy) {
  return policy == SamplingPolicy::balance ? "balance" : "none";
}

SamplingPolicy parse_sampling_policy(const std::string& text) {
  if (text == "none") return SamplingPolicy::none;
  if (text == "balance") return SamplingPolicy::balance;
  throw ConfigError("unknown sampling policy '" + text + "' (expected none or balance)");
}

SamplerPlan balance_sampler(const Dataset& dataset, SamplingPolicy policy, std::uint64_t seed) {
  if (dataset.samples.empty()) throw SamplerError("cannot sample from an empty dataset");
  Rng rng(seed);
  SamplerPlan plan;
  plan.policy = policy;
  const std::size_t total = dataset.samples.size();

  if (policy == SamplingPolicy::none) {
    plan.epoch_indices.resize(total);
    std::iota(plan.epoch_indices.begin(), plan.epoch_indices.end(), std::size_t{0});
    std::shuffle(plan.epoch_indices.begin(), plan.epoch_indices.end(), rng.engine());
    return plan;
  }

  const std::size_t k = dataset.class_names.size();
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < total; ++i) members.at(dataset.samples[i].label).push_back(i);
  for (std::size_t c = 0; c < k; ++c) {
    if (members[c].empty()) {
      throw SamplerError("class '" + dataset.class_names[c] + "' has no samples to balance");
    }
  }
  // Which classes receive the remainder slot is itself drawn from the seed.
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::size_t> quota(k, total / k);
  for (std::size_t j = 0; j < total % k; ++j) ++quota[order[j]];

  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> pool;
    for (std::size_t q = 0; q < quota[c]; ++q) {
      if (pool.empty()) {
        pool = members[c];
        std::shuffle(pool.begin(), pool.end(), rng.engine());
      }
      plan.epoch_indices.push_back(pool.back());
      pool.pop_back();
    }
  }
  std::shuffle(plan.epoch_indices.begin(), plan.epoch_indices.end(), rng.engine());
  return plan;
}

void write_manifest(const Dataset& dataset, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "path,label\n";
  for (const auto& s : dataset.samples) out << s.source << ',' << s.label << '\n';
  if (!out) throw IoError("error while writing manifest " + path.string());
}

void export_dataset(const Dataset& dataset, const fs::path& dir) {
  Dataset written = dataset;
  std::vector<std::size_t> next(dataset.class_names.size(), 0);
  for (auto& s : written.samples) {
    const std::string& cls = dataset.class_names.at(s.label);
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", next[s.label]++);
    const fs::path rel = fs::path(cls) / name;
    write_image(dir / rel, s.image);
    s.source = rel.generic_string();
  }
  write_manifest(written, dir / "manifest.csv");
}

}  // namespace cmnet
