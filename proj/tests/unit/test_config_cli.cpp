#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "test_util.hpp"
#include "udaseg/cli.hpp"
#include "udaseg/config.hpp"
#include "udaseg/errors.hpp"

using namespace udaseg;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> config_errors(const std::string& text) {
  try {
    parse_config(text, {.check_paths = false});
  } catch (const ConfigErrors& e) {
    return e.errors();
  }
  return {};
}

bool mentions(const std::vector<std::string>& errors, const std::string& needle) {
  for (const auto& e : errors)
    if (e.find(needle) != std::string::npos) return true;
  return false;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("minimal file gets the defaults") {
  auto c = parse_config("config.version = 1\n", {.check_paths = false});
  CHECK(c.model.num_levels == 5);
  CHECK(c.model.velocity_levels == std::vector<int64_t>{1, 3, 5});
  CHECK(c.model.num_bases == 6);
  CHECK(c.train.weights.tau == 0.05);
  CHECK(c.train.lr == 1e-3);
  CHECK(c.train.weight_decay == 1e-4);
  CHECK(parse_config("", {.check_paths = false}).model.num_bases == 6);
}

TEST_CASE("published loss weight rows are accepted") {
  auto c = parse_config(
      "train.lambdas_sa = 1,15,65,0.5,1\n"
      "train.lambdas_sf1 = 1,15,65,2,1\n"
      "train.lambdas_sf2 = 0,15,65,0,0\n"
      "train.lambdas = 20,15,25,1e-4,10\n",
      {.check_paths = false});
  CHECK(c.train_for(TrainMode::kSA).weights.as_list() == std::array<double, 5>{1, 15, 65, 0.5, 1});
  CHECK(c.train_for(TrainMode::kSF1).weights.tem == 2);
  CHECK(c.train_for(TrainMode::kSF2).weights.seg == 0);
  CHECK(c.train_for(TrainMode::kBaseline).weights.as_list() == std::array<double, 5>{20, 15, 25, 1e-4, 10});
}

TEST_CASE("violations are collected, not fail-first") {
  auto errs = config_errors(
      "model.velocity_levels = 3,1\n"
      "train.tau = 0.3\n"
      "model.bogus = 4\n"
      "train.lr = abc\n"
      "seed = 1\nseed = 2\n");
  CHECK(errs.size() >= 5);
  CHECK(mentions(errs, "ascending"));
  CHECK(mentions(errs, "train.tau"));
  CHECK(mentions(errs, "1/M"));
  CHECK(mentions(errs, "unknown key 'model.bogus'"));
  CHECK(mentions(errs, "line 4"));
  CHECK(mentions(errs, "duplicate key 'seed'"));
  CHECK(mentions(config_errors("model.velocity_levels = 1,7\n"), "outside 1..L"));
  CHECK(mentions(config_errors("model.bases = 1\n"), "model.bases"));
  CHECK(mentions(config_errors("model.classes = 2\n"), "gen.classes"));
  CHECK(mentions(config_errors("just text\n"), "expected 'key = value'"));
}

TEST_CASE("paths are checked when asked") {
  CHECK_THROWS_AS(parse_config("data.root = /definitely/not/here\n"), ConfigErrors);
  CHECK_NOTHROW(parse_config("data.root = /definitely/not/here\n", {.check_paths = false}));
  CHECK_THROWS_AS(validate_config("/definitely/not/here.cfg"), ConfigError);
}

TEST_CASE("dump round trips") {
  auto c = parse_config("model.bases = 4\ntrain.tau = 0.1\ntrain.epochs_sf2 = 7\n", {.check_paths = false});
  auto again = parse_config(dump_config(c), {.check_paths = false});
  CHECK(dump_config(again) == dump_config(c));
  CHECK(again.model.num_bases == 4);
  CHECK(again.train_for(TrainMode::kSF2).epochs == 7);
  CHECK(config_keys().size() > 30);
}

TEST_CASE("shipped configs validate") {
  for (const char* name : {"default.cfg", "benchmark.cfg"}) {
    const auto p = fs::path(UDASEG_SOURCE_DIR) / "configs" / name;
    CAPTURE(p);
    CHECK_NOTHROW(validate_config(p, {.check_paths = false}));
  }
}

}

TEST_SUITE("cli") {

TEST_CASE("exit codes") {
  CHECK(run(std::vector<std::string>{"selftest"}) == kExitOk);
  CHECK(run(std::vector<std::string>{"no-such-command"}) == kExitValidation);
  CHECK(run(std::vector<std::string>{}) == kExitValidation);
  CHECK(run(std::vector<std::string>{"train", "--mode", "sideways"}) == kExitValidation);

  const auto dir = testutil::scratch_dir("cli");
  const auto cfg = write_file(dir / "ok.cfg", "config.version = 1\n");
  CHECK(run(std::vector<std::string>{"train", "--mode", "sf2", "--config", cfg.string(), "--out", (dir / "a").string()}) ==
        kExitValidation);
  const auto bad = write_file(dir / "bad.cfg", "model.velocity_levels = 3,1\n");
  CHECK(run(std::vector<std::string>{"generate-data", "--config", bad.string(), "--out", (dir / "b").string()}) ==
        kExitValidation);
  CHECK(run(std::vector<std::string>{"evaluate", "--ckpt", (dir / "missing.pt").string(), "--data",
                                     dir.string(), "--out", (dir / "c").string()}) == kExitRuntime);
  CHECK(run(std::vector<std::string>{"traverse", "inter-basis", "--ckpt", (dir / "missing.pt").string(), "-i", "1",
                                     "-j", "2", "--out", (dir / "d").string()}) == kExitRuntime);
}

TEST_CASE("run manifest") {
  const auto dir = testutil::scratch_dir("manifest");
  const auto cfg = write_file(dir / "gen.cfg",
                              "seed = 3\ngen.height = 32\ngen.width = 32\ngen.source_train = 2\ngen.source_val = 1\n"
                              "gen.target_train = 2\ngen.target_val = 1\ngen.target_test = 1\n");
  REQUIRE(run(std::vector<std::string>{"generate-data", "--config", cfg.string(), "--out", (dir / "data").string()}) ==
          kExitOk);
  nlohmann::json m;
  std::ifstream(dir / "data" / "run_manifest.json") >> m;
  CHECK(m["command"] == "generate-data");
  CHECK(m["exit_code"] == 0);
  CHECK(m["seed"] == 3);
  CHECK(m.contains("code_version"));
  CHECK(m.contains("started"));
  CHECK(m["config"].get<std::string>().find("gen.height = 32") != std::string::npos);
  CHECK(fs::exists(dir / "data" / "source_train" / "manifest.json"));
}

}
