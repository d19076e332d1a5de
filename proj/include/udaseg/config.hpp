#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "udaseg/errors.hpp"
#include "udaseg/networks.hpp"
#include "udaseg/synthetic.hpp"
#include "udaseg/training.hpp"

namespace udaseg {

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig generator;
  std::filesystem::path data_root;    // empty: not set
  std::filesystem::path output_root = "runs";
  uint64_t seed = 0;
  // Per-mode overrides keyed by mode name (sa, sf1, sf2, baseline).
  std::map<std::string, std::array<double, 5>> lambdas_by_mode;
  std::map<std::string, int> epochs_by_mode;
  std::map<std::string, std::string> raw;  // keys as written in the file

  /// Training settings for one mode, with its overrides applied.
  TrainConfig train_for(TrainMode mode) const;
};

/// Every violation found in a config, in file order.
class ConfigErrors : public ConfigError {
 public:
  explicit ConfigErrors(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

struct ValidateOptions {
  bool check_paths = true;  // data.root must exist when set
};

/// Parses `key = value` lines ('#' starts a comment). Unknown keys, malformed
/// values and range violations are all collected before throwing ConfigErrors.
ExperimentConfig parse_config(const std::string& text, const ValidateOptions& opts = {});
ExperimentConfig validate_config(const std::filesystem::path& file, const ValidateOptions& opts = {});

/// Every recognised key with a one-line description, in documentation order.
const std::vector<std::pair<std::string, std::string>>& config_keys();

/// Canonical `key = value` text of a config (all keys, defaults included).
std::string dump_config(const ExperimentConfig& cfg);

}  // namespace udaseg
