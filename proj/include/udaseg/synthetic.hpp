#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

namespace udaseg {

enum class Domain { kSource, kTarget };
std::string to_string(Domain d);
Domain parse_domain(const std::string& s);

/// One 2-D slice: image in [0, 1], optional label map in {0..K}.
struct Sample {
  std::string id;
  std::string subject;
  Domain domain = Domain::kSource;
  int height = 0;
  int width = 0;
  std::array<double, 2> spacing{1.0, 1.0};  // mm/px (row, column)
  std::vector<float> image;
  std::vector<uint8_t> label;  // empty when unlabeled

  bool labeled() const { return !label.empty(); }
};

/// Appearance of one domain: intensity per tissue, then gamma, bias field
/// and additive noise.
struct DomainStyle {
  // outside-body, body, then one entry per foreground class (1..K).
  std::vector<double> intensities;
  double gamma = 1.0;
  double noise_sd = 0.0;
  double bias_amplitude = 0.0;
};

struct GeneratorConfig {
  int height = 64;
  int width = 64;
  int num_classes = 3;
  int topology_variants = 4;
  double spacing = 1.0;
  double elastic_amplitude = 1.5;  // px, control-point standard deviation
  double max_rotation_deg = 15.0;
  double scale_jitter = 0.1;
  double max_shift = 3.0;
  DomainStyle source{{0.05, 0.30, 0.45, 0.95, 0.80}, 1.0, 0.03, 0.10};
  DomainStyle target{{0.05, 0.60, 0.95, 0.25, 0.45}, 1.3, 0.05, 0.20};
  int source_train = 200;
  int source_val = 25;
  int target_train = 200;
  int target_val = 25;
  int target_test = 50;
  uint64_t seed = 0;

  /// Throws ConfigError listing every violation.
  void validate() const;
};

inline constexpr int kMaxTopologyVariants = 6;

/// Geometry of one synthetic subject, independent of domain appearance.
struct Anatomy {
  int variant = 0;
  double lv_x = 0, lv_y = 0, lv_rx = 0, lv_ry = 0, myo_thickness = 0;
  double rv_rx = 0, rv_ry = 0, rv_dy = 0;
  double body_rx = 0, body_ry = 0;
  double rotation = 0, scale = 1, shift_x = 0, shift_y = 0;
  std::vector<double> elastic;  // control grid, x then y components
  int elastic_grid = 0;
};

/// Draws the anatomy for stream `key` of the generator.
Anatomy draw_anatomy(const GeneratorConfig& cfg, uint64_t key);

/// Renders label and image of an anatomy under a domain style. `key` seeds
/// the appearance randomness (bias field, noise).
Sample render_sample(const GeneratorConfig& cfg, const Anatomy& anatomy, const DomainStyle& style,
                     uint64_t key);

struct SplitSpec {
  std::string name;
  Domain domain;
  int count;
  bool labeled;
};

/// source_train, source_val, target_train (unlabeled), target_val, target_test.
std::vector<SplitSpec> default_splits(const GeneratorConfig& cfg);

/// Generates every split in memory.
std::vector<std::pair<SplitSpec, std::vector<Sample>>> generate_in_memory(const GeneratorConfig& cfg);

/// Writes the dataset: one directory per split with 16-bit image PNGs, 8-bit
/// label PNGs and manifest.json, plus dataset.json at the root.
void generate(const GeneratorConfig& cfg, const std::filesystem::path& out_dir);

struct LoadOptions {
  int height = 0;               // 0: keep stored size
  int width = 0;
  double target_spacing = 0.0;  // 0: keep stored spacing
};

/// Loads one split directory. A directory without a manifest yields an empty
/// list and a warning; schema problems throw DataError naming the field.
std::vector<Sample> load_split(const std::filesystem::path& split_dir, const LoadOptions& opts = {});

/// Resample to the target spacing (bilinear), centre crop/pad to
/// (crop_h, crop_w) and min-max normalize to [0, 1].
std::vector<float> preprocess(const std::vector<float>& image, int height, int width,
                              std::array<double, 2> spacing, double target_spacing, int crop_h,
                              int crop_w);

/// Nearest-neighbour counterpart of preprocess for label maps (no normalization).
std::vector<uint8_t> preprocess_label(const std::vector<uint8_t>& label, int height, int width,
                                      std::array<double, 2> spacing, double target_spacing,
                                      int crop_h, int crop_w);

/// Stacks images into [N, 1, H, W] float32.
torch::Tensor images_tensor(const std::vector<Sample>& samples);
/// Stacks labels into [N, H, W] int64; throws DataError for unlabeled samples.
torch::Tensor labels_tensor(const std::vector<Sample>& samples);

/// FNV-1a checksum over every split's pixels, labels and ids.
uint64_t dataset_checksum(const std::vector<std::pair<SplitSpec, std::vector<Sample>>>& data);

}  // namespace udaseg
