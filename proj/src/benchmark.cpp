#include "udaseg/benchmark.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "udaseg/errors.hpp"
#include "udaseg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace udaseg {
namespace {

std::vector<Sample> split(const std::vector<std::pair<SplitSpec, std::vector<Sample>>>& data, const std::string& name) {
  for (const auto& [spec, samples] : data) {
    if (spec.name == name) return samples;
  }
  throw DataError("missing split '" + name + "'");
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// True when `dir` holds a finished run with exactly this stamp.
bool finished(const fs::path& dir, const std::string& stamp) {
  return fs::exists(dir / "summary.json") && fs::exists(dir / "best.pt") && fs::exists(dir / "stamp.txt") &&
         read_file(dir / "stamp.txt") == stamp;
}

void write_stamp(const fs::path& dir, const std::string& stamp) { std::ofstream(dir / "stamp.txt") << stamp; }

/// Runs `train` and records its wall time in dir/train_seconds.txt.
void timed(const fs::path& dir, const std::function<void()>& train) {
  const auto t0 = std::chrono::steady_clock::now();
  train();
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  std::ofstream(dir / "train_seconds.txt") << dt.count() << "\n";
}

double train_seconds(const fs::path& dir) {
  std::ifstream is(dir / "train_seconds.txt");
  double v = 0.0;
  is >> v;
  return v;
}

double test_dice(const fs::path& ckpt, const std::vector<Sample>& test, const fs::path& report_dir, int k) {
  const auto loaded = load_checkpoint(ckpt);
  const auto report = evaluate(loaded.predictor(), test, k);
  report.write_csv(report_dir / "test_metrics.csv");
  std::ofstream(report_dir / "test_summary.txt") << report.summary_table();
  return report.average_dsc().mean / 100.0;
}

}  // namespace

BenchmarkResult run_benchmark(const BenchmarkOptions& opts) {
  const auto& exp = opts.exp;
  fs::create_directories(opts.out_dir);
  std::cerr << "generating synthetic data\n";
  const auto data = generate_in_memory(exp.generator);
  const SourceData source{split(data, "source_train"), split(data, "source_val")};
  const TargetData target{split(data, "target_train"), split(data, "target_val")};
  const auto test = split(data, "target_test");
  const int k = static_cast<int>(exp.model.num_classes);
  const auto gen_stamp = std::to_string(dataset_checksum(data));
  const auto model_stamp = model_config_json(exp.model);

  BenchmarkResult r;
  r.num_bases = static_cast<int>(exp.model.num_bases);
  auto stage = [&](const std::string& name, TrainMode mode, const std::string& extra,
                   const std::function<void(const TrainConfig&, const fs::path&)>& train) {
    const auto dir = opts.out_dir / name;
    const auto cfg = exp.train_for(mode);
    const auto stamp = gen_stamp + "\n" + model_stamp + "\n" + train_config_json(cfg) + "\n" + extra;
    if (!(opts.reuse && finished(dir, stamp))) {
      std::cerr << "training " << name << "\n";
      fs::remove_all(dir);
      timed(dir, [&] { train(cfg, dir); });
      write_stamp(dir, stamp);
    } else {
      std::cerr << "reusing finished " << name << " run\n";
    }
    return stamp;
  };

  stage("baseline", TrainMode::kBaseline, "", [&](const TrainConfig& c, const fs::path& d) {
    train_baseline(c, exp.model, source, d);
  });
  r.baseline_dsc = test_dice(opts.out_dir / "baseline" / "best.pt", test, opts.out_dir / "baseline", k);

  stage("sa", TrainMode::kSA, "", [&](const TrainConfig& c, const fs::path& d) {
    train_source_accessible(c, exp.model, source, target, d);
  });
  r.sa_dsc = test_dice(opts.out_dir / "sa" / "best.pt", test, opts.out_dir / "sa", k);
  std::vector<Sample> train_images = source.train;
  train_images.insert(train_images.end(), target.train.begin(), target.train.end());
  {
    auto loaded = load_checkpoint(opts.out_dir / "sa" / "best.pt");
    const auto act = basis_activation_report(loaded.model, train_images);
    r.sa_activated = act.activated;
    r.sa_mean_usage = act.mean_usage;
  }

  const auto sf1_stamp = stage("sf1", TrainMode::kSF1, "", [&](const TrainConfig& c, const fs::path& d) {
    train_source_free_stage1(c, exp.model, source, d);
  });
  r.sf1_dsc = test_dice(opts.out_dir / "sf1" / "best.pt", test, opts.out_dir / "sf1", k);
  stage("sf2", TrainMode::kSF2, sf1_stamp, [&](const TrainConfig& c, const fs::path& d) {
    train_source_free_stage2(c, target, opts.out_dir / "sf1" / "best.pt", d);
  });
  r.sf_dsc = test_dice(opts.out_dir / "sf2" / "best.pt", test, opts.out_dir / "sf2", k);
  {
    const auto check = json::parse(read_file(opts.out_dir / "sf2" / "freeze_check.json"));
    r.freeze_intact = check.at("intact").get<bool>();
  }

  if (opts.run_ablation) {
    ExperimentConfig ab = exp;
    ab.train.weights.usage_enabled = false;
    const auto dir = opts.out_dir / "sa_no_usage";
    const auto cfg = ab.train_for(TrainMode::kSA);
    const auto stamp = gen_stamp + "\n" + model_stamp + "\n" + train_config_json(cfg) + "\n";
    if (!(opts.reuse && finished(dir, stamp))) {
      std::cerr << "training sa_no_usage\n";
      fs::remove_all(dir);
      timed(dir, [&] { train_source_accessible(cfg, ab.model, source, target, dir); });
      write_stamp(dir, stamp);
    }
    auto loaded = load_checkpoint(dir / "best.pt");
    const auto act = basis_activation_report(loaded.model, train_images);
    r.ablation_activated = act.activated;
    r.ablation_mean_usage = act.mean_usage;
  }
  for (const auto* name : {"baseline", "sa", "sf1", "sf2"}) {
    r.stage_seconds[name] = train_seconds(opts.out_dir / name);
    r.benchmark_seconds += r.stage_seconds[name];
  }
  if (opts.run_ablation) r.stage_seconds["sa_no_usage"] = train_seconds(opts.out_dir / "sa_no_usage");

  json j{{"baseline_dsc", r.baseline_dsc},     {"sa_dsc", r.sa_dsc},
         {"sf1_dsc", r.sf1_dsc},               {"sf_dsc", r.sf_dsc},
         {"sa_activated", r.sa_activated},     {"sa_mean_usage", r.sa_mean_usage},
         {"ablation_activated", r.ablation_activated}, {"ablation_mean_usage", r.ablation_mean_usage},
         {"freeze_intact", r.freeze_intact},   {"num_bases", r.num_bases},
         {"stage_seconds", r.stage_seconds},   {"benchmark_seconds", r.benchmark_seconds},
         {"dataset_checksum", gen_stamp}};
  std::ofstream(opts.out_dir / "benchmark.json") << j.dump(2) << "\n";
  std::ofstream txt(opts.out_dir / "benchmark.txt");
  txt << "target test mean foreground DSC\n"
      << "  no adaptation : " << r.baseline_dsc << "\n"
      << "  SA            : " << r.sa_dsc << "\n"
      << "  SF stage 1    : " << r.sf1_dsc << "\n"
      << "  SF stage 2    : " << r.sf_dsc << "\n"
      << "bases activated (SA): " << r.sa_activated << " of " << r.num_bases << "\n";
  if (r.ablation_activated >= 0) {
    txt << "bases activated (SA, no usage loss): " << r.ablation_activated << " of " << r.num_bases << "\n";
  }
  txt << "frozen groups intact after stage 2: " << (r.freeze_intact ? "yes" : "no") << "\n";
  txt << "training time, baseline + SA + SF stages: " << r.benchmark_seconds / 60.0 << " min\n";
  return r;
}

BenchmarkResult read_benchmark(const fs::path& json_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("cannot read '" + json_path.string() + "'");
  const auto j = json::parse(is);
  BenchmarkResult r;
  r.baseline_dsc = j.at("baseline_dsc");
  r.sa_dsc = j.at("sa_dsc");
  r.sf1_dsc = j.at("sf1_dsc");
  r.sf_dsc = j.at("sf_dsc");
  r.sa_activated = j.at("sa_activated");
  r.sa_mean_usage = j.at("sa_mean_usage").get<std::vector<double>>();
  r.ablation_activated = j.at("ablation_activated");
  r.ablation_mean_usage = j.at("ablation_mean_usage").get<std::vector<double>>();
  r.freeze_intact = j.at("freeze_intact");
  r.num_bases = j.at("num_bases");
  r.stage_seconds = j.value("stage_seconds", std::map<std::string, double>{});
  r.benchmark_seconds = j.value("benchmark_seconds", 0.0);
  return r;
}

}  // namespace udaseg
