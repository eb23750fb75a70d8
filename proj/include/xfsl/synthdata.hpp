#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xfsl/sample.hpp"

namespace xfsl::synth {

enum class Split { train_pool, test_confounded, test_deconfounded };

const char* to_string(Split split);
Split split_from_string(const std::string& name);

// Lesion shape per class: 0 filled disc, 1 annulus, 2 cross.
enum class Shape { disc, annulus, cross };

struct SynthConfig {
  std::size_t n_classes = 3;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;  // per class, for each test split
  bool confounded_test = true;
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::size_t radius_min = 6;
  std::size_t radius_max = 12;
  double background = 0.5;
  double noise_sigma = 0.1;
  double lesion_contrast = 0.4;
  std::size_t tag_size = 6;
  double tag_contrast = 0.5;
  // P(tag corner == label). Otherwise the tag goes to one of the remaining
  // corners uniformly, so 0.25 makes the corner independent of the label.
  double spurious_rate = 0.95;
  double deconfounded_rate = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

// Corners: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
struct SynthSample {
  Sample sample;
  Split split = Split::train_pool;
  int tag_corner = 0;
};

struct ManifestEntry {
  std::string id;
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;
  std::size_t label = 0;
  Split split = Split::train_pool;
  int tag_corner = -1;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
};

// Builds every split in memory. Pixel values are already quantized to the
// 8-bit grid used on disk, so a dataset loaded back from files is identical.
std::vector<SynthSample> synthesize(const SynthConfig& config);

// Writes images/, masks/ and manifest.jsonl under out_dir.
Manifest generate(const SynthConfig& config, const std::filesystem::path& out_dir);

// Rasterized lesion support for a shape centred at (cy, cx); exposed so tests
// can rebuild masks independently.
std::vector<double> rasterize(Shape shape, std::size_t size, long cy, long cx, long radius);

// JSON-lines manifest. Errors (ParseError) cite the 1-based line number.
Manifest load_manifest(const std::filesystem::path& path, std::size_t n_classes = 3);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

Sample load_sample(const Manifest& manifest, const ManifestEntry& entry);
std::vector<Sample> load_split(const Manifest& manifest, Split split);

}  // namespace xfsl::synth
