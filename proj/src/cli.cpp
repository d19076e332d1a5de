#include "udaseg/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/version.h>

#include "udaseg/benchmark.hpp"
#include "udaseg/config.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/evaluation.hpp"
#include "udaseg/simplex.hpp"
#include "udaseg/training.hpp"

#ifndef UDASEG_VERSION
#define UDASEG_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace udaseg {
namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string stamp_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

/// Records what a command did so the run can be reproduced.
struct Manifest {
  std::string command;
  std::vector<std::string> args;
  std::string started = utc_now();
  std::optional<ExperimentConfig> config;
  std::string config_path;
  json extra = json::object();

  void write(const fs::path& dir, int exit_code, const std::string& message) const {
    json j{{"command", command},
           {"args", args},
           {"code_version", UDASEG_VERSION},
           {"torch_version", TORCH_VERSION},
           {"started", started},
           {"finished", utc_now()},
           {"exit_code", exit_code},
           {"message", message}};
    if (config) {
      j["seed"] = config->seed;
      j["config_path"] = config_path;
      j["config"] = dump_config(*config);
    }
    for (auto& [k, v] : extra.items()) j[k] = v;
    fs::create_directories(dir);
    std::ofstream(dir / "run_manifest.json") << j.dump(2) << "\n";
  }
};

fs::path output_root(const std::optional<ExperimentConfig>& cfg) {
  if (const char* env = std::getenv("UDASEG_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  if (cfg) return cfg->output_root;
  return "runs";
}

fs::path resolve_out(const std::string& out, const std::optional<ExperimentConfig>& cfg, const std::string& name) {
  if (!out.empty()) return out;
  return output_root(cfg) / (name + "-" + stamp_now());
}

LoadOptions load_options(const ModelConfig& m) {
  return {static_cast<int>(m.image_height), static_cast<int>(m.image_width), 0.0};
}

std::vector<Sample> load_required(const fs::path& dir, const LoadOptions& opts) {
  auto s = load_split(dir, opts);
  if (s.empty()) throw DataError("split '" + dir.string() + "' is empty or missing");
  return s;
}

// ---------------------------------------------------------------- selftest

struct Check {
  int failures = 0;
  void report(const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << " (" << detail << ")\n";
    failures += ok ? 0 : 1;
  }
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << std::scientific << v;
  return os.str();
}

}  // namespace

int selftest() {
  Check c;
  torch::manual_seed(0);
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);

  {  // Equal-variance two-basis mixture: mean averages, variance unchanged.
    auto means = torch::tensor({0.3, -1.1}, f64).view({2, 1});
    auto vars = torch::full({2, 1}, 0.7, f64);
    auto fused = fuse_gaussians(means, vars, torch::tensor({{0.5, 0.5}}, f64));
    const double err = std::abs(fused.mean.item<double>() + 0.4) + std::abs(fused.variance.item<double>() - 0.7);
    c.report("mixture: equal-variance fusion", err < 1e-12, "abs err " + fmt(err));
  }
  {  // One-hot weights select a single basis.
    auto means = torch::randn({3, 4}, f64);
    auto vars = torch::rand({3, 4}, f64) + 0.1;
    auto fused = fuse_gaussians(means, vars, torch::tensor({{0.0, 1.0, 0.0}}, f64));
    const double err = (fused.mean[0] - means[1]).abs().max().item<double>() +
                       (fused.variance[0] - vars[1]).abs().max().item<double>();
    c.report("mixture: one-hot selects basis", err < 1e-12, "abs err " + fmt(err));
  }
  {
    DiagonalGaussian q{torch::zeros({1}, f64), torch::ones({1}, f64)};
    DiagonalGaussian p{torch::ones({1}, f64), torch::ones({1}, f64)};
    const double kl = kl_diag_gaussian(q, p).item<double>();
    c.report("kl: N(0,1) || N(1,1) = 0.5", std::abs(kl - 0.5) < 1e-12, "value " + fmt(kl));
  }
  {
    const auto a = CompositionWeights({1.0, 0.0});
    const auto b = CompositionWeights({0.5, 0.5});
    const double d = fisher_rao_distance(a, b);
    c.report("geodesic: FR((1,0),(.5,.5)) = pi/2", std::abs(d - std::numbers::pi / 2) < 1e-12, "value " + fmt(d));
    const auto mid = geodesic_interpolate(CompositionWeights::one_hot(2, 0), CompositionWeights::one_hot(2, 1), 0.5);
    const double err = std::abs(mid[0] - 0.5) + std::abs(mid[1] - 0.5);
    c.report("geodesic: e1 to e2 midpoint", err < 1e-12, "abs err " + fmt(err));
    const auto w = CompositionWeights({0.1, 0.2, 0.3, 0.05, 0.15, 0.2});
    const auto w2 = CompositionWeights({0.4, 0.05, 0.05, 0.3, 0.1, 0.1});
    double worst = 0.0;
    for (double alpha : {0.1, 0.3, 0.5, 0.9}) {
      const auto t = geodesic_interpolate(w, w2, alpha);
      worst = std::max(worst, std::abs(fisher_rao_distance(t, w) - alpha * fisher_rao_distance(w, w2)));
    }
    c.report("geodesic: arc-length linearity", worst < 1e-9, "max err " + fmt(worst));
  }
  {  // exp(v) o exp(-v) is close to the identity for a smooth field.
    const int64_t n = 32;
    auto yy = torch::arange(n, f64).view({n, 1}).expand({n, n});
    auto xx = torch::arange(n, f64).view({1, n}).expand({n, n});
    auto v = torch::stack({2.0 * torch::sin(yy * 2 * std::numbers::pi / n), 1.5 * torch::cos(xx * 2 * std::numbers::pi / n)})
                 .unsqueeze(0);
    auto fwd = exponentiate(v);
    auto inv = invert(v);
    auto ident = compose(fwd, inv).displacement.slice(2, 4, n - 4).slice(3, 4, n - 4);
    const double err = ident.abs().max().item<double>();
    c.report("svf: exp(v) o exp(-v) = id (interior)", err < 0.5, "max px " + fmt(err));
    const double jmin = jacobian_determinant(fwd.displacement).min().item<double>();
    c.report("svf: positive Jacobian determinant", jmin > 0, "min " + fmt(jmin));
  }
  {  // Stage decomposition on a tiny model.
    ModelConfig mc;
    mc.image_height = mc.image_width = 16;
    mc.num_levels = 3;
    mc.velocity_levels = {1, 3};
    mc.num_bases = 3;
    mc.latent_channels = 4;
    mc.base_width = mc.max_width = mc.registration_width = mc.decoder_width = 4;
    Model model(mc);
    model->to(torch::kFloat64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    auto xs = torch::rand({3, 1, 16, 16}, f64);
    auto xt = torch::rand({3, 1, 16, 16}, f64);
    auto ys = torch::randint(0, 4, {3, 16, 16}, torch::kLong);
    auto fs_ = model->forward(xs, SampleMode::kSampled, gen);
    auto ft = model->forward(xt, SampleMode::kSampled, gen);
    auto w = LossWeights::from_list({1.0, 15.0, 65.0, 0.5, 1.0}, 0.2);
    auto w2 = LossWeights::from_list({1.0, 15.0, 65.0, 1.0, 2.0}, 0.2);
    const double sa = stage_loss_sa({xs, ys, fs_}, {xt, ft}, *model->basis_bank, w).total;
    const double rhs = 0.5 * (stage_loss_sf1({xs, ys, fs_}, *model->basis_bank, w2).total +
                              stage_loss_sf2({xt, ft}, w).total);
    const double rel = std::abs(sa - rhs) / std::max(1.0, std::abs(sa));
    c.report("decomposition: SA = (SF1 + SF2) / 2", rel < 1e-10, "rel err " + fmt(rel));
  }
  std::cout << (c.failures == 0 ? "selftest: all checks passed\n" : "selftest: FAILED\n");
  return c.failures;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Unified domain-adaptive segmentation with shared anatomical bases", "udaseg"};
  app.require_subcommand(1);

  std::string config_path, out, data, mode, resume, ckpt;
  bool deterministic = false, no_ablation = false, fresh = false;
  int steps = 7, first = 0, second = 1, bi = 1, bj = 2;
  std::vector<std::string> data_dirs;

  auto* gen_cmd = app.add_subcommand("generate-data", "write the synthetic two-domain dataset");
  gen_cmd->add_option("--config", config_path, "config file")->required();
  gen_cmd->add_option("--out", out, "dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train one stage");
  train_cmd->add_option("--mode", mode, "sa, sf1, sf2 or baseline")->required();
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to resume from (the stage-1 checkpoint for sf2)");
  train_cmd->add_option("--data", data, "dataset root (overrides data.root)");
  train_cmd->add_option("--out", out, "run directory");
  train_cmd->add_flag("--deterministic", deterministic, "single-threaded, seed-stable execution");

  auto* eval_cmd = app.add_subcommand("evaluate", "metrics of a checkpoint on a labeled split");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval_cmd->add_option("--data", data, "split directory")->required();
  eval_cmd->add_option("--out", out, "report directory");

  auto* trav_cmd = app.add_subcommand("traverse", "decode geodesic paths on the weight simplex");
  trav_cmd->require_subcommand(1);
  auto* trav_img = trav_cmd->add_subcommand("inter-image", "path between the weights of two images");
  trav_img->add_option("--ckpt", ckpt, "checkpoint")->required();
  trav_img->add_option("--data", data, "split directory")->required();
  trav_img->add_option("--first", first, "index of the first image")->capture_default_str();
  trav_img->add_option("--second", second, "index of the second image")->capture_default_str();
  trav_img->add_option("--steps", steps, "points on the path")->capture_default_str();
  trav_img->add_option("--out", out, "output directory");
  auto* trav_basis = trav_cmd->add_subcommand("inter-basis", "path between two one-hot weights");
  trav_basis->add_option("--ckpt", ckpt, "checkpoint")->required();
  trav_basis->add_option("-i", bi, "first basis (1-based)")->capture_default_str();
  trav_basis->add_option("-j", bj, "second basis (1-based)")->capture_default_str();
  trav_basis->add_option("--steps", steps, "points on the path")->capture_default_str();
  trav_basis->add_option("--out", out, "output directory");

  auto* export_cmd = app.add_subcommand("export-latents", "composition weights as CSV plus a PCA plot");
  export_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  export_cmd->add_option("--data", data_dirs, "one or more split directories")->required();
  export_cmd->add_option("--out", out, "output directory");

  auto* self_cmd = app.add_subcommand("selftest", "analytic-oracle checks");

  auto* bench_cmd = app.add_subcommand("benchmark", "baseline, SA, SF and ablation on synthetic data");
  bench_cmd->add_option("--config", config_path, "config file")->required();
  bench_cmd->add_option("--out", out, "benchmark directory");
  bench_cmd->add_flag("--no-ablation", no_ablation, "skip the usage-loss ablation");
  bench_cmd->add_flag("--fresh", fresh, "retrain every stage");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitValidation;
  }

  Manifest manifest;
  manifest.args = args;
  fs::path run_dir;
  try {
    if (self_cmd->parsed()) {
      manifest.command = "selftest";
      return selftest() == 0 ? kExitOk : kExitRuntime;
    }
    if (gen_cmd->parsed()) {
      manifest.command = "generate-data";
      manifest.config = validate_config(config_path, {false});
      manifest.config_path = config_path;
      run_dir = out;
      generate(manifest.config->generator, run_dir);
      std::cout << "dataset written to " << run_dir.string() << "\n";
    } else if (train_cmd->parsed()) {
      manifest.command = "train";
      const auto m = parse_train_mode(mode);
      auto cfg = validate_config(config_path, {data.empty()});
      if (!data.empty()) {
        if (!fs::is_directory(data)) throw ConfigError("--data '" + data + "' is not a directory");
        cfg.data_root = data;
      }
      if (cfg.data_root.empty()) throw ConfigError("no dataset: set data.root or pass --data");
      if (m == TrainMode::kSF2 && resume.empty()) {
        throw ConfigError("train --mode sf2 requires --resume <stage-1 checkpoint>");
      }
      if (!resume.empty() && !fs::exists(resume)) throw ConfigError("--resume '" + resume + "' does not exist");
      manifest.config = cfg;
      manifest.config_path = config_path;
      auto tc = cfg.train_for(m);
      tc.deterministic = deterministic;
      run_dir = resolve_out(out, cfg, "train-" + mode);
      const auto lo = load_options(cfg.model);
      const auto root = cfg.data_root;
      std::optional<fs::path> res = resume.empty() ? std::nullopt : std::optional<fs::path>(resume);
      TrainResult r;
      switch (m) {
        case TrainMode::kSA:
          r = train_source_accessible(tc, cfg.model,
                                      {load_required(root / "source_train", lo), load_split(root / "source_val", lo)},
                                      {load_required(root / "target_train", lo), load_required(root / "target_val", lo)},
                                      run_dir, res);
          break;
        case TrainMode::kSF1:
          r = train_source_free_stage1(
              tc, cfg.model, {load_required(root / "source_train", lo), load_required(root / "source_val", lo)},
              run_dir, res);
          break;
        case TrainMode::kSF2:
          r = train_source_free_stage2(
              tc, {load_required(root / "target_train", lo), load_required(root / "target_val", lo)}, resume, run_dir);
          break;
        case TrainMode::kBaseline:
          r = train_baseline(tc, cfg.model,
                             {load_required(root / "source_train", lo), load_required(root / "source_val", lo)},
                             run_dir, res);
          break;
      }
      manifest.extra["best_metric"] = r.best_metric;
      manifest.extra["steps"] = r.steps;
      std::cout << "best " << to_string(tc.selection()) << " " << r.best_metric << " -> "
                << r.best_checkpoint.string() << "\n";
    } else if (eval_cmd->parsed()) {
      manifest.command = "evaluate";
      const auto loaded = load_checkpoint(ckpt);
      run_dir = resolve_out(out, std::nullopt, "evaluate");
      const auto samples = load_required(data, load_options(loaded.meta.model));
      const auto report = evaluate(loaded.predictor(), samples, static_cast<int>(loaded.meta.model.num_classes));
      fs::create_directories(run_dir);
      report.write_csv(run_dir / "metrics.csv");
      std::ofstream(run_dir / "summary.txt") << report.summary_table();
      std::cout << report.summary_table();
      manifest.extra["checkpoint"] = ckpt;
      manifest.extra["average_dsc"] = report.average_dsc().mean;
    } else if (trav_cmd->parsed()) {
      manifest.command = "traverse";
      auto loaded = load_checkpoint(ckpt);
      if (!loaded.model) throw ConfigError("traversal needs a model checkpoint, not a baseline");
      run_dir = resolve_out(out, std::nullopt, "traverse");
      Traversal t;
      std::string stem;
      if (trav_img->parsed()) {
        const auto samples = load_required(data, load_options(loaded.meta.model));
        const auto n = static_cast<int>(samples.size());
        if (first < 0 || first >= n || second < 0 || second >= n) {
          throw ConfigError("image index outside 0.." + std::to_string(n - 1));
        }
        t = traverse_inter_image(loaded.model, images_tensor({samples[static_cast<std::size_t>(first)]}),
                                 images_tensor({samples[static_cast<std::size_t>(second)]}), steps);
        stem = "inter_image_" + samples[static_cast<std::size_t>(first)].id + "_" +
               samples[static_cast<std::size_t>(second)].id;
      } else {
        t = traverse_inter_basis(loaded.model, bi, bj, steps);
        stem = "inter_basis_" + std::to_string(bi) + "_" + std::to_string(bj);
      }
      write_traversal(t, run_dir, stem);
      std::cout << "wrote " << (run_dir / (stem + ".png")).string() << "\n";
    } else if (export_cmd->parsed()) {
      manifest.command = "export-latents";
      auto loaded = load_checkpoint(ckpt);
      if (!loaded.model) throw ConfigError("latent export needs a model checkpoint, not a baseline");
      run_dir = resolve_out(out, std::nullopt, "latents");
      std::vector<std::vector<Sample>> sets;
      for (const auto& d : data_dirs) sets.push_back(load_split(d, load_options(loaded.meta.model)));
      const auto ex = export_latents(loaded.model, sets, run_dir);
      std::cout << "exported " << ex.rows << " rows; PC1+PC2 explain "
                << ex.pca.explained[0] + ex.pca.explained[1] << " of the variance\n";
    } else if (bench_cmd->parsed()) {
      manifest.command = "benchmark";
      manifest.config = validate_config(config_path, {false});
      manifest.config_path = config_path;
      run_dir = resolve_out(out, manifest.config, "benchmark");
      const auto r = run_benchmark({*manifest.config, run_dir, !no_ablation, !fresh});
      std::ifstream is(run_dir / "benchmark.txt");
      std::cout << is.rdbuf();
      manifest.extra["sa_dsc"] = r.sa_dsc;
      manifest.extra["sf_dsc"] = r.sf_dsc;
      manifest.extra["baseline_dsc"] = r.baseline_dsc;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!run_dir.empty()) manifest.write(run_dir, kExitValidation, e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!run_dir.empty()) manifest.write(run_dir, kExitRuntime, e.what());
    return kExitRuntime;
  }
  manifest.write(run_dir, kExitOk, "ok");
  return kExitOk;
}

}  // namespace udaseg
