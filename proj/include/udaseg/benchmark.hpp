#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "udaseg/config.hpp"
#include "udaseg/evaluation.hpp"

namespace udaseg {

struct BenchmarkOptions {
  ExperimentConfig exp;
  std::filesystem::path out_dir;
  bool run_ablation = true;
  /// Reuse a finished stage whose recorded settings match exactly.
  bool reuse = true;
};

struct BenchmarkResult {
  // Mean foreground DSC in [0, 1] on the target test split.
  double baseline_dsc = 0.0;
  double sa_dsc = 0.0;
  double sf1_dsc = 0.0;  // stage one alone, i.e. before adaptation
  double sf_dsc = 0.0;
  int sa_activated = 0;
  std::vector<double> sa_mean_usage;
  int ablation_activated = -1;  // -1: not run
  std::vector<double> ablation_mean_usage;
  bool freeze_intact = false;
  int num_bases = 0;
  std::map<std::string, double> stage_seconds;  // training wall time per stage
  double benchmark_seconds = 0.0;               // baseline + sa + sf1 + sf2
};

/// Generates the synthetic dataset in memory and trains/evaluates the
/// no-adaptation baseline, the source-accessible model, the two source-free
/// stages and (optionally) the usage-ablated source-accessible model. Writes
/// benchmark.json and benchmark.txt into out_dir.
BenchmarkResult run_benchmark(const BenchmarkOptions& opts);

/// Reads benchmark.json written by run_benchmark.
BenchmarkResult read_benchmark(const std::filesystem::path& json_path);

}  // namespace udaseg
