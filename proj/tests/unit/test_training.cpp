#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "test_util.hpp"
#include "udaseg/cli.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/training.hpp"

using namespace udaseg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_height = 32;
  c.image_width = 32;
  c.num_levels = 3;
  c.velocity_levels = {1, 3};
  c.num_bases = 3;
  c.num_classes = 3;
  c.latent_channels = 4;
  c.base_width = 4;
  c.max_width = 8;
  c.registration_width = 4;
  c.decoder_width = 4;
  return c;
}

struct TinyData {
  SourceData source;
  TargetData target;
  std::vector<Sample> test;
};

const TinyData& tiny_data() {
  static const TinyData data = [] {
    GeneratorConfig g;
    g.height = 32;
    g.width = 32;
    g.source_train = 8;
    g.source_val = 4;
    g.target_train = 8;
    g.target_val = 4;
    g.target_test = 4;
    auto splits = generate_in_memory(g);
    TinyData d;
    d.source = {splits[0].second, splits[1].second};
    d.target = {splits[2].second, splits[3].second};
    d.test = splits[4].second;
    return d;
  }();
  return data;
}

TrainConfig tiny_train(TrainMode mode, int epochs = 1) {
  TrainConfig t;
  t.mode = mode;
  t.batch_source = 4;
  t.batch_target = 4;
  t.epochs = epochs;
  t.val_every = 1;
  t.verbose = false;
  t.deterministic = true;
  if (mode == TrainMode::kSF1) t.weights = LossWeights::from_list({1, 15, 65, 2, 1});
  if (mode == TrainMode::kSF2) t.weights = LossWeights::from_list({0, 15, 65, 0, 0});
  t.weights.tau = 0.05;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("source-accessible smoke run") {
  const auto dir = testutil::scratch_dir("train-sa");
  const auto& d = tiny_data();
  auto res = train_source_accessible(tiny_train(TrainMode::kSA), tiny_model(), d.source, d.target, dir);
  CHECK(res.steps == 2);
  CHECK(fs::exists(res.best_checkpoint));
  CHECK(fs::exists(res.last_checkpoint));
  for (const auto& r : res.history) CHECK(std::isfinite(r.total));
  const auto log = slurp(dir / "train_log.csv");
  CHECK(log.rfind("step,epoch,recon_s", 0) == 0);
  const auto meta = read_checkpoint_meta(res.last_checkpoint);
  CHECK(meta.kind == "udaseg");
  CHECK(meta.mode == "sa");
  CHECK(meta.step == 2);
  CHECK(meta.config_hash.size() == 16);

  TargetData empty;
  CHECK_THROWS_AS(train_source_accessible(tiny_train(TrainMode::kSA), tiny_model(), d.source, empty, dir / "x"),
                  DataError);
  CHECK_THROWS_AS(train_source_accessible(tiny_train(TrainMode::kSF1), tiny_model(), d.source, d.target, dir / "y"),
                  ConfigError);
}

TEST_CASE("deterministic runs are bitwise identical") {
  const auto& d = tiny_data();
  auto cfg = tiny_train(TrainMode::kSA, 2);
  const auto a = testutil::scratch_dir("det-a");
  const auto b = testutil::scratch_dir("det-b");
  train_source_accessible(cfg, tiny_model(), d.source, d.target, a);
  train_source_accessible(cfg, tiny_model(), d.source, d.target, b);
  CHECK(slurp(a / "train_log.csv") == slurp(b / "train_log.csv"));
  CHECK(slurp(a / "val_log.csv") == slurp(b / "val_log.csv"));
}

TEST_CASE("resume continues the same trajectory") {
  const auto& d = tiny_data();
  const auto full = testutil::scratch_dir("resume-full");
  const auto part = testutil::scratch_dir("resume-part");
  train_source_free_stage1(tiny_train(TrainMode::kSF1, 2), tiny_model(), d.source, full);
  train_source_free_stage1(tiny_train(TrainMode::kSF1, 1), tiny_model(), d.source, part);
  const auto resumed = testutil::scratch_dir("resume-rest");
  train_source_free_stage1(tiny_train(TrainMode::kSF1, 2), tiny_model(), d.source, resumed, part / "last.pt");
  // The resumed run logs only its own steps; they must match the tail of the full run.
  const auto full_log = slurp(full / "train_log.csv");
  const auto rest_log = slurp(resumed / "train_log.csv");
  const auto header_end = rest_log.find('\n') + 1;
  const auto tail = rest_log.substr(header_end);
  REQUIRE(!tail.empty());
  CHECK(full_log.size() >= tail.size());
  CHECK(full_log.substr(full_log.size() - tail.size()) == tail);
}

TEST_CASE("checkpoint round trip is bitwise") {
  torch::manual_seed(9);
  Model model(tiny_model());
  const auto dir = testutil::scratch_dir("ckpt");
  CheckpointMeta meta;
  meta.kind = "udaseg";
  meta.mode = "sf1";
  meta.model = tiny_model();
  meta.train_config = "{}";
  save_model_checkpoint(dir / "m.pt", meta, *model, nullptr, std::nullopt);
  auto loaded = load_checkpoint(dir / "m.pt");
  auto x = images_tensor(tiny_data().test);
  torch::NoGradGuard ng;
  auto a = model->forward(x, SampleMode::kExpectation);
  auto b = loaded.model->forward(x, SampleMode::kExpectation);
  CHECK(torch::equal(a.seg.probs, b.seg.probs));
  CHECK(torch::equal(a.recon.loc, b.recon.loc));
  CHECK(torch::equal(a.weights, b.weights));
  CHECK(model_config_json(loaded.meta.model) == model_config_json(tiny_model()));
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.pt"), IoError);
  std::ofstream(dir / "junk.pt") << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(dir / "junk.pt"));
}

TEST_CASE("stage two keeps the frozen groups intact") {
  const auto& d = tiny_data();
  const auto s1 = testutil::scratch_dir("sf-1");
  const auto s2 = testutil::scratch_dir("sf-2");
  auto r1 = train_source_free_stage1(tiny_train(TrainMode::kSF1), tiny_model(), d.source, s1);
  auto stage1 = load_checkpoint(r1.best_checkpoint);
  auto r2 = train_source_free_stage2(tiny_train(TrainMode::kSF2, 2), d.target, r1.best_checkpoint, s2);
  auto stage2 = load_checkpoint(r2.last_checkpoint);
  for (const auto& g : kFrozenInStage2) {
    CAPTURE(g);
    CHECK(group_checksum(*stage1.model, g) == group_checksum(*stage2.model, g));
  }
  // Something else did move.
  CHECK(group_checksum(*stage1.model, "registration") != group_checksum(*stage2.model, "registration"));
  nlohmann::json check;
  std::ifstream(s2 / "freeze_check.json") >> check;
  CHECK(check["intact"] == true);
  CHECK(read_checkpoint_meta(r2.last_checkpoint).mode == "sf2");

  // Resuming stage two from its own checkpoint is allowed; other kinds are not.
  const auto s3 = testutil::scratch_dir("sf-3");
  CHECK_NOTHROW(train_source_free_stage2(tiny_train(TrainMode::kSF2, 3), d.target, r2.last_checkpoint, s3));
  const auto sa = testutil::scratch_dir("sf-sa");
  auto rs = train_source_accessible(tiny_train(TrainMode::kSA), tiny_model(), d.source, d.target, sa);
  CHECK_THROWS_AS(train_source_free_stage2(tiny_train(TrainMode::kSF2), d.target, rs.last_checkpoint, s3 / "x"),
                  ConfigError);
}

TEST_CASE("frozen groups are guarded") {
  Model model(tiny_model());
  CHECK_THROWS_AS(assert_frozen(*model, kFrozenInStage2), InvariantViolation);
  for (const auto& g : kFrozenInStage2)
    for (auto& p : model->group_parameters(g)) p.set_requires_grad(false);
  CHECK_NOTHROW(assert_frozen(*model, kFrozenInStage2));
  model->group_parameters("seg_decoder").front().mutable_grad() = torch::ones({1});
  CHECK_THROWS_AS(assert_frozen(*model, kFrozenInStage2), InvariantViolation);
}

TEST_CASE("baseline segmenter trains and reloads") {
  const auto dir = testutil::scratch_dir("baseline");
  const auto& d = tiny_data();
  auto r = train_baseline(tiny_train(TrainMode::kBaseline), tiny_model(), d.source, dir);
  auto ck = load_checkpoint(r.best_checkpoint);
  CHECK(ck.meta.kind == "baseline");
  CHECK(!ck.model);
  auto report = evaluate(ck.predictor(), d.test, 3);
  CHECK(report.subjects.size() == 4);
}

TEST_CASE("command-line pipeline") {
  const auto dir = testutil::scratch_dir("pipeline");
  std::ofstream(dir / "tiny.cfg") << "seed = 1\n"
                                     "model.height = 32\nmodel.width = 32\nmodel.levels = 3\n"
                                     "model.velocity_levels = 1,3\nmodel.bases = 3\n"
                                     "model.latent_channels = 4\nmodel.base_width = 4\nmodel.max_width = 8\n"
                                     "model.registration_width = 4\nmodel.decoder_width = 4\n"
                                     "gen.height = 32\ngen.width = 32\ngen.source_train = 8\ngen.source_val = 2\n"
                                     "gen.target_train = 8\ngen.target_val = 2\ngen.target_test = 3\n"
                                     "train.batch_source = 4\ntrain.batch_target = 4\ntrain.tau = 0.05\n"
                                     "train.epochs = 1\ntrain.val_every = 1\n";
  const auto cfg = (dir / "tiny.cfg").string();
  const auto data = (dir / "data").string();
  auto run_ok = [](std::vector<std::string> args) { return run(args) == kExitOk; };
  REQUIRE(run_ok({"generate-data", "--config", cfg, "--out", data}));
  REQUIRE(run_ok({"train", "--mode", "sf1", "--config", cfg, "--data", data, "--out", (dir / "sf1").string(),
                  "--deterministic"}));
  REQUIRE(run_ok({"train", "--mode", "sf2", "--config", cfg, "--data", data, "--resume",
                  (dir / "sf1" / "best.pt").string(), "--out", (dir / "sf2").string()}));
  REQUIRE(run_ok({"evaluate", "--ckpt", (dir / "sf2" / "best.pt").string(), "--data", data + "/target_test", "--out",
                  (dir / "eval").string()}));
  CHECK(fs::exists(dir / "eval" / "metrics.csv"));
  CHECK(fs::exists(dir / "eval" / "summary.txt"));
  CHECK(run_ok({"traverse", "inter-basis", "--ckpt", (dir / "sf2" / "best.pt").string(), "-i", "1", "-j", "3",
                "--steps", "4", "--out", (dir / "tb").string()}));
  CHECK(run({"traverse", "inter-basis", "--ckpt", (dir / "sf2" / "best.pt").string(), "-i", "1", "-j", "9", "--out",
             (dir / "tb2").string()}) == kExitValidation);
  CHECK(run_ok({"traverse", "inter-image", "--ckpt", (dir / "sf2" / "best.pt").string(), "--data",
                data + "/target_test", "--first", "0", "--second", "2", "--steps", "5", "--out",
                (dir / "ti").string()}));
  CHECK(run_ok({"export-latents", "--ckpt", (dir / "sf2" / "best.pt").string(), "--data", data + "/source_train",
                "--data", data + "/target_train", "--out", (dir / "lat").string()}));
  std::ifstream lat(dir / "lat" / "latents.csv");
  std::string line;
  int rows = -1;
  while (std::getline(lat, line)) ++rows;
  CHECK(rows == 16);
}

}
