#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmnet/image.hpp"

namespace cmnet {

enum class SplitTag { train, val, test };
std::string to_string(SplitTag tag);

struct ImageSample {
  Image image;  // H x W x C, values in [0, 1]
  std::size_t label = 0;
  std::string source;  // file path, or a generated identifier
};

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  SplitTag split = SplitTag::train;

  std::size_t size() const noexcept { return samples.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::vector<std::size_t> class_counts() const;
};

struct IngestResult {
  Dataset dataset;
  std::vector<std::string> skipped_files;  // undecodable
  std::vector<std::string> empty_classes;
};

// Root holds one subdirectory per class. Classes and files are visited in
// lexicographic order; undecodable files are skipped and logged.
IngestResult ingest_folder(const std::filesystem::path& root, SplitTag split = SplitTag::train);

std::optional<Image> read_image(const std::filesystem::path& path);
// Values are clamped to [0, 1] and quantised to 8 bits.
void write_image(const std::filesystem::path& path, const Image& image);

// Per-channel normalisation applied after resizing. Defaults are the RGB
// statistics the 18-layer reference weights were trained with.
struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev{0.229f, 0.224f, 0.225f};

  static Normalization identity() { return {{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}}; }
};

// Bilinear resize to size x size, optional grey -> RGB replication, then
// normalisation.
Image preprocess(const Image& image, std::size_t size, bool grayscale_expand,
                 const Normalization& norm = {});

// Class-dependent blob/stripe faces rendered mirror-symmetric about the
// vertical midline; `asymmetry` scales noise added to the right half only.
Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class, std::size_t num_classes,
                       double asymmetry, std::size_t size = 64);

// Two classes (horizontal vs vertical stripes) drawn as a patch in one random
// quadrant; the rest of the image is low-contrast noise.
struct QuadrantDataset {
  Dataset dataset;
  std::vector<std::size_t> quadrant;  // 0 TL, 1 TR, 2 BL, 3 BR per sample
};
QuadrantDataset synth_quadrant(std::uint64_t seed, std::size_t n_per_class, std::size_t size = 64);

enum class SamplingPolicy { none, balance };
std::string to_string(SamplingPolicy policy);
SamplingPolicy parse_sampling_policy(const std::string& text);

struct SamplerPlan {
  std::vector<std::size_t> epoch_indices;
  SamplingPolicy policy = SamplingPolicy::none;
};

// none: shuffled identity permutation. balance: every class receives
// floor(E/K) or ceil(E/K) slots (E = dataset size); a class is cycled through
// fresh permutations of its samples until its quota is filled, so majority
// classes are subsampled and minority classes repeated.
SamplerPlan balance_sampler(const Dataset& dataset, SamplingPolicy policy, std::uint64_t seed);

// "path,label" lines, one per sample, in dataset order.
void write_manifest(const Dataset& dataset, const std::filesystem::path& path);
// Writes <dir>/<class>/<index>.png for every sample plus <dir>/manifest.csv.
void export_dataset(const Dataset& dataset, const std::filesystem::path& dir);

}  // namespace cmnet
