#include "udaseg/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include "udaseg/errors.hpp"
#include "udaseg/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace udaseg {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kSA: return "sa";
    case TrainMode::kSF1: return "sf1";
    case TrainMode::kSF2: return "sf2";
    case TrainMode::kBaseline: return "baseline";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& s) {
  if (s == "sa") return TrainMode::kSA;
  if (s == "sf1") return TrainMode::kSF1;
  if (s == "sf2") return TrainMode::kSF2;
  if (s == "baseline") return TrainMode::kBaseline;
  throw ConfigError("unknown training mode '" + s + "' (expected sa, sf1, sf2 or baseline)");
}

std::string to_string(Selection s) {
  switch (s) {
    case Selection::kSourceDice: return "source_val_dsc";
    case Selection::kTargetDice: return "target_val_dsc";
    case Selection::kTargetNll: return "target_val_recon_nll";
  }
  return "?";
}

Selection TrainConfig::selection() const {
  switch (mode) {
    case TrainMode::kSA: return Selection::kTargetDice;
    case TrainMode::kSF2: return sf2_select_by_dice ? Selection::kTargetDice : Selection::kTargetNll;
    default: return Selection::kSourceDice;
  }
}

void TrainConfig::validate(int64_t num_bases) const {
  std::ostringstream err;
  if (batch_source < 1 || batch_target < 1) err << "batch sizes must be >= 1; ";
  if (!(lr > 0)) err << "lr must be > 0; ";
  if (weight_decay < 0) err << "weight_decay must be >= 0; ";
  if (!(basis_lr_scale > 0)) err << "basis_lr_scale must be > 0; ";
  if (epochs < 1) err << "epochs must be >= 1; ";
  if (val_every < 1) err << "val_every must be >= 1; ";
  if (max_steps < 0) err << "max_steps must be >= 0; ";
  try {
    weights.validate(num_bases);
  } catch (const ConfigError& e) {
    err << e.what() << "; ";
  }
  if (!(prior.smooth > 0) || !(prior.magnitude > 0)) err << "velocity prior constants must be > 0; ";
  if (!err.str().empty()) throw ConfigError("train config: " + err.str());
}

std::string model_config_json(const ModelConfig& c) {
  json j{{"image_height", c.image_height},   {"image_width", c.image_width},
         {"num_levels", c.num_levels},       {"velocity_levels", c.velocity_levels},
         {"num_bases", c.num_bases},         {"num_classes", c.num_classes},
         {"latent_channels", c.latent_channels}, {"base_width", c.base_width},
         {"max_width", c.max_width},         {"registration_width", c.registration_width},
         {"decoder_width", c.decoder_width}, {"squaring_steps", c.squaring_steps},
         {"basis_init_variance", c.basis_init_variance}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = json::parse(text);
    c.image_height = j.at("image_height");
    c.image_width = j.at("image_width");
    c.num_levels = j.at("num_levels");
    c.velocity_levels = j.at("velocity_levels").get<std::vector<int64_t>>();
    c.num_bases = j.at("num_bases");
    c.num_classes = j.at("num_classes");
    c.latent_channels = j.at("latent_channels");
    c.base_width = j.at("base_width");
    c.max_width = j.at("max_width");
    c.registration_width = j.at("registration_width");
    c.decoder_width = j.at("decoder_width");
    c.squaring_steps = j.at("squaring_steps");
    c.basis_init_variance = j.value("basis_init_variance", 1.0);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint model config is malformed: ") + e.what());
  }
  return c;
}

std::string train_config_json(const TrainConfig& c) {
  json j{{"mode", to_string(c.mode)},
         {"batch_source", c.batch_source},
         {"batch_target", c.batch_target},
         {"lambdas", c.weights.as_list()},
         {"tau", c.weights.tau},
         {"usage_enabled", c.weights.usage_enabled},
         {"velocity_prior", {c.prior.smooth, c.prior.magnitude}},
         {"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"basis_lr_scale", c.basis_lr_scale},
         {"epochs", c.epochs},
         {"val_every", c.val_every},
         {"seed", c.seed},
         {"deterministic", c.deterministic},
         {"sf2_select_by_dice", c.sf2_select_by_dice},
         {"max_steps", c.max_steps},
         {"selection", to_string(c.selection())}};
  return j.dump();
}

namespace {

uint64_t fnv1a(const void* data, std::size_t n, uint64_t h = 1469598103934665603ULL) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string config_hash(const std::string& model_json, const std::string& train_json) {
  const auto s = model_json + "\n" + train_json;
  return hex64(fnv1a(s.data(), s.size()));
}

std::vector<int64_t> permutation(uint64_t seed, uint64_t stream, std::size_t n) {
  std::vector<int64_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int64_t>(i);
  CounterRng r(seed, stream);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[r.below(i)]);
  return p;
}

std::vector<Sample> pick(const std::vector<Sample>& all, const std::vector<int64_t>& perm, std::size_t start,
                         std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(all[static_cast<std::size_t>(perm[(start + i) % perm.size()])]);
  }
  return out;
}

json report_json(const LossReport& r) {
  json j;
  const auto names = LossReport::column_names();
  const auto vals = r.values();
  for (std::size_t i = 0; i < names.size(); ++i) {
    j[names[i]] = std::isfinite(vals[i]) ? json(vals[i]) : json(std::to_string(vals[i]));
  }
  return j;
}

void configure_threads(const TrainConfig& cfg) {
  if (cfg.deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
}

at::Generator make_generator(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

void require_nonempty(const std::vector<Sample>& v, const std::string& what) {
  if (v.empty()) throw DataError(what + " is empty");
}

void require_labeled(const std::vector<Sample>& v, const std::string& what) {
  for (const auto& s : v) {
    if (!s.labeled()) throw DataError(what + " sample '" + s.id + "' has no label");
  }
}

/// Mean reconstruction NLL of target validation images, expectation mode.
double target_recon_nll(Model& model, const std::vector<Sample>& val) {
  torch::NoGradGuard ng;
  double total = 0.0;
  for (std::size_t i = 0; i < val.size(); i += 16) {
    const auto end = std::min(val.size(), i + 16);
    auto x = images_tensor({val.begin() + static_cast<std::ptrdiff_t>(i), val.begin() + static_cast<std::ptrdiff_t>(end)});
    auto f = model->forward(x, SampleMode::kExpectation);
    total += recon_nll(x, f.recon.loc, f.recon.scale).sum().item<double>();
  }
  return total / static_cast<double>(val.size());
}

/// Shared epoch loop: logging, validation, selection, checkpoints, NaN abort.
struct Loop {
  const TrainConfig& cfg;
  fs::path out_dir;
  CheckpointMeta meta;
  torch::nn::Module& net;
  torch::optim::Optimizer& opt;
  at::Generator gen;
  int64_t steps_per_epoch = 0;
  std::function<LossReport(int64_t epoch, int64_t index)> compute{};
  std::function<double()> validate{};
  bool higher_is_better = true;
  std::function<void()> after_backward{};

  TrainResult run() {
    fs::create_directories(out_dir);
    const auto log_path = out_dir / "train_log.csv";
    const auto val_path = out_dir / "val_log.csv";
    const bool fresh = meta.step == 0;
    std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
    std::ofstream vlog(val_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log || !vlog) throw IoError("cannot write logs in '" + out_dir.string() + "'");
    if (fresh) {
      log << "step,epoch";
      for (const auto& n : LossReport::column_names()) log << "," << n;
      log << "\n";
      vlog << "epoch,step," << to_string(cfg.selection()) << "\n";
      meta.best_metric = higher_is_better ? -std::numeric_limits<double>::infinity()
                                          : std::numeric_limits<double>::infinity();
    }
    log << std::setprecision(17);
    vlog << std::setprecision(17);

    TrainResult res;
    res.best_checkpoint = out_dir / "best.pt";
    res.last_checkpoint = out_dir / "last.pt";
    res.best_metric = meta.best_metric;
    const auto t0 = std::chrono::steady_clock::now();
    bool stop = false;
    for (int64_t epoch = meta.epoch; epoch < cfg.epochs && !stop; ++epoch) {
      net.train();
      double epoch_total = 0.0;
      int64_t n = 0;
      for (int64_t i = 0; i < steps_per_epoch; ++i) {
        opt.zero_grad();
        auto report = compute(epoch, i);
        if (!std::isfinite(report.total)) {
          const auto dump = report_json(report).dump();
          std::ofstream(out_dir / "nan_dump.json") << dump << "\n";
          throw NumericError("non-finite loss at step " + std::to_string(meta.step) + ": " + dump);
        }
        report.objective.backward();
        if (after_backward) after_backward();
        opt.step();
        ++meta.step;
        log << meta.step << "," << epoch;
        for (double v : report.values()) log << "," << v;
        log << "\n";
        epoch_total += report.total;
        ++n;
        report.objective = torch::Tensor();
        res.history.push_back(report);
        if (cfg.max_steps > 0 && meta.step >= cfg.max_steps) {
          stop = true;
          break;
        }
      }
      log.flush();
      meta.epoch = epoch + 1;
      const bool last = stop || meta.epoch == cfg.epochs;
      if (meta.epoch % cfg.val_every == 0 || last) {
        net.eval();
        const double metric = validate();
        vlog << meta.epoch << "," << meta.step << "," << metric << "\n";
        vlog.flush();
        const bool better = higher_is_better ? metric > meta.best_metric : metric < meta.best_metric;
        if (better || !fs::exists(res.best_checkpoint)) {
          meta.best_metric = metric;
          res.best_epoch = meta.epoch;
          save_model_checkpoint(res.best_checkpoint, meta, net, &opt, gen);
        }
        if (cfg.verbose) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::cerr << std::fixed << std::setprecision(4) << "[" << meta.mode << "] epoch " << meta.epoch << "/"
                    << cfg.epochs << " loss " << epoch_total / std::max<int64_t>(n, 1) << " "
                    << to_string(cfg.selection()) << " " << metric << " (" << std::setprecision(0) << secs
                    << " s)\n";
        }
      }
      save_model_checkpoint(res.last_checkpoint, meta, net, &opt, gen);
    }
    res.best_metric = meta.best_metric;
    res.steps = meta.step;
    std::ofstream(out_dir / "summary.json")
        << json{{"mode", meta.mode},
                {"selection", to_string(cfg.selection())},
                {"best_metric", meta.best_metric},
                {"best_epoch", res.best_epoch},
                {"steps", meta.step},
                {"epochs", meta.epoch},
                {"config_hash", meta.config_hash}}
               .dump(2)
        << "\n";
    return res;
  }
};

void write_ivalue(torch::serialize::OutputArchive& ar, const std::string& key, const std::string& v) {
  ar.write(key, c10::IValue(v));
}

std::string read_string(torch::serialize::InputArchive& ar, const std::string& key) {
  c10::IValue v;
  if (!ar.try_read(key, v) || !v.isString()) throw DataError("checkpoint lacks '" + key + "'");
  return v.toStringRef();
}

std::string meta_json(const CheckpointMeta& m) {
  return json{{"format", "udaseg-checkpoint"},
              {"version", 1},
              {"kind", m.kind},
              {"mode", m.mode},
              {"model", json::parse(model_config_json(m.model))},
              {"train", json::parse(m.train_config.empty() ? "{}" : m.train_config)},
              {"config_hash", m.config_hash},
              {"step", m.step},
              {"epoch", m.epoch},
              {"best_metric", m.best_metric}}
      .dump();
}

CheckpointMeta parse_meta(const std::string& text) {
  CheckpointMeta m;
  try {
    const auto j = json::parse(text);
    if (j.at("format") != "udaseg-checkpoint" || j.at("version") != 1) throw DataError("unsupported checkpoint format");
    m.kind = j.at("kind");
    m.mode = j.at("mode");
    m.model = model_config_from_json(j.at("model").dump());
    m.train_config = j.at("train").dump();
    m.config_hash = j.at("config_hash");
    m.step = j.at("step");
    m.epoch = j.at("epoch");
    m.best_metric = j.at("best_metric");
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
  return m;
}

struct RawCheckpoint {
  CheckpointMeta meta;
  torch::serialize::InputArchive model;
  std::optional<torch::serialize::InputArchive> optimizer;
  std::optional<torch::Tensor> rng_state;
};

RawCheckpoint read_raw(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint '" + path.string() + "': " + e.what_without_backtrace());
  }
  RawCheckpoint raw;
  raw.meta = parse_meta(read_string(ar, "meta"));
  if (!ar.try_read("model", raw.model)) throw DataError("checkpoint lacks model parameters");
  torch::serialize::InputArchive opt;
  if (ar.try_read("optimizer", opt)) raw.optimizer = std::move(opt);
  torch::Tensor rng;
  if (ar.try_read("rng_state", rng)) raw.rng_state = rng;
  return raw;
}

void load_params(torch::nn::Module& net, torch::serialize::InputArchive& ar) {
  try {
    net.load(ar);
  } catch (const c10::Error& e) {
    throw DataError(std::string("checkpoint parameters do not match the model: ") + e.what_without_backtrace());
  }
}

std::unique_ptr<torch::optim::AdamW> make_adamw(const std::vector<torch::Tensor>& params, const TrainConfig& cfg) {
  return std::make_unique<torch::optim::AdamW>(
      params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
}

std::vector<torch::Tensor> trainable_parameters(const ModelImpl& model, const std::vector<std::string>& frozen);

// The basis bank gets its own group so its learning rate can be scaled.
std::unique_ptr<torch::optim::AdamW> make_model_adamw(ModelImpl& model, const TrainConfig& cfg,
                                                      const std::vector<std::string>& frozen = {}) {
  const bool bank_frozen = std::find(frozen.begin(), frozen.end(), "basis_bank") != frozen.end();
  std::vector<torch::Tensor> rest;
  for (const auto& p : trainable_parameters(model, frozen)) rest.push_back(p);
  std::vector<torch::Tensor> bank;
  if (!bank_frozen) {
    bank = model.group_parameters("basis_bank");
    std::erase_if(rest, [&](const torch::Tensor& p) {
      return std::any_of(bank.begin(), bank.end(), [&](const torch::Tensor& b) { return b.is_same(p); });
    });
  }
  auto opts = torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(rest, std::make_unique<torch::optim::AdamWOptions>(opts));
  if (!bank.empty()) {
    auto bank_opts = opts;
    bank_opts.lr(cfg.lr * cfg.basis_lr_scale);
    groups.emplace_back(bank, std::make_unique<torch::optim::AdamWOptions>(bank_opts));
  }
  return std::make_unique<torch::optim::AdamW>(std::move(groups), opts);
}

CheckpointMeta fresh_meta(const std::string& kind, const TrainConfig& cfg, const ModelConfig& mc) {
  CheckpointMeta m;
  m.kind = kind;
  m.mode = to_string(cfg.mode);
  m.model = mc;
  m.train_config = train_config_json(cfg);
  m.config_hash = config_hash(model_config_json(mc), m.train_config);
  return m;
}

/// Restores optimizer, RNG and counters from a checkpoint of the same mode.
void resume_from(RawCheckpoint& raw, CheckpointMeta& meta, torch::nn::Module& net,
                 torch::optim::Optimizer& opt, at::Generator& gen, const std::string& expected_mode) {
  if (raw.meta.mode != expected_mode) {
    throw ConfigError("cannot resume a '" + expected_mode + "' run from a '" + raw.meta.mode + "' checkpoint");
  }
  load_params(net, raw.model);
  if (raw.optimizer) opt.load(*raw.optimizer);
  if (raw.rng_state) gen.set_state(*raw.rng_state);
  meta.step = raw.meta.step;
  meta.epoch = raw.meta.epoch;
  meta.best_metric = raw.meta.best_metric;
  if (raw.meta.config_hash != meta.config_hash) {
    std::cerr << "warning: resuming with a configuration that differs from the checkpoint's\n";
  }
}

std::vector<torch::Tensor> trainable_parameters(const ModelImpl& model, const std::vector<std::string>& frozen) {
  std::vector<torch::Tensor> out;
  for (const auto& g : kParameterGroups) {
    if (std::find(frozen.begin(), frozen.end(), g) != frozen.end()) continue;
    auto p = model.group_parameters(g);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

int64_t steps_for(std::size_t n, int batch) {
  return std::max<int64_t>(1, static_cast<int64_t>(n) / batch);
}

}  // namespace

void save_model_checkpoint(const fs::path& path, const CheckpointMeta& meta, torch::nn::Module& net,
                           torch::optim::Optimizer* opt, const std::optional<at::Generator>& gen) {
  torch::serialize::OutputArchive ar;
  write_ivalue(ar, "meta", meta_json(meta));
  torch::serialize::OutputArchive model_ar;
  net.save(model_ar);
  ar.write("model", model_ar);
  if (opt != nullptr) {
    torch::serialize::OutputArchive opt_ar;
    opt->save(opt_ar);
    ar.write("optimizer", opt_ar);
  }
  if (gen) ar.write("rng_state", gen->get_state());
  const auto tmp = fs::path(path.string() + ".tmp");
  try {
    ar.save_to(tmp.string());
    fs::rename(tmp, path);
  } catch (const std::exception& e) {
    throw IoError("cannot write checkpoint '" + path.string() + "': " + e.what());
  }
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) { return read_raw(path).meta; }

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  auto raw = read_raw(path);
  LoadedCheckpoint out;
  out.meta = raw.meta;
  if (raw.meta.kind == "udaseg") {
    out.model = Model(raw.meta.model);
    load_params(*out.model, raw.model);
    out.model->eval();
  } else if (raw.meta.kind == "baseline") {
    out.unet = AttentionUNet(raw.meta.model);
    load_params(*out.unet, raw.model);
    out.unet->eval();
  } else {
    throw DataError("unknown checkpoint kind '" + raw.meta.kind + "'");
  }
  return out;
}

Predictor LoadedCheckpoint::predictor() const {
  if (model) return model_predictor(model);
  if (unet) return unet_predictor(unet);
  throw UnsupportedError("empty checkpoint");
}

uint64_t group_checksum(const ModelImpl& model, const std::string& group) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.group_parameters(group)) {
    auto c = p.detach().contiguous();
    h = fnv1a(c.data_ptr(), static_cast<std::size_t>(c.numel()) * c.element_size(), h);
  }
  return h;
}

void assert_frozen(const ModelImpl& model, const std::vector<std::string>& groups) {
  for (const auto& g : groups) {
    for (const auto& p : model.group_parameters(g)) {
      if (p.requires_grad() || (p.grad().defined() && p.grad().abs().sum().item<double>() != 0.0)) {
        throw InvariantViolation("frozen parameter group '" + g + "' received a gradient");
      }
    }
  }
}

TrainResult train_source_accessible(const TrainConfig& cfg, const ModelConfig& mc, const SourceData& source,
                                    const TargetData& target, const fs::path& out_dir,
                                    const std::optional<fs::path>& resume) {
  if (cfg.mode != TrainMode::kSA) throw ConfigError("train_source_accessible needs mode sa");
  mc.validate();
  cfg.validate(mc.num_bases);
  require_nonempty(source.train, "source train split");
  require_nonempty(target.train, "target train split");
  require_nonempty(target.val, "target val split");
  require_labeled(source.train, "source train");
  require_labeled(target.val, "target val");
  configure_threads(cfg);

  torch::manual_seed(cfg.seed);
  Model model(mc);
  auto opt = make_model_adamw(*model, cfg);
  auto gen = make_generator(cfg.seed);
  auto meta = fresh_meta("udaseg", cfg, mc);
  if (resume) {
    auto raw = read_raw(*resume);
    resume_from(raw, meta, *model, *opt, gen, "sa");
  }

  const int64_t steps = steps_for(source.train.size(), cfg.batch_source);
  Loop loop{cfg, out_dir, meta, *model, *opt, gen};
  loop.steps_per_epoch = steps;
  loop.compute = [&](int64_t epoch, int64_t i) {
    const auto ps = permutation(cfg.seed, 2 * static_cast<uint64_t>(epoch), source.train.size());
    const auto pt = permutation(cfg.seed, 2 * static_cast<uint64_t>(epoch) + 1, target.train.size());
    const auto bs = pick(source.train, ps, static_cast<std::size_t>(i * cfg.batch_source), static_cast<std::size_t>(cfg.batch_source));
    const auto bt = pick(target.train, pt, static_cast<std::size_t>(i * cfg.batch_target), static_cast<std::size_t>(cfg.batch_target));
    auto xs = images_tensor(bs);
    auto ys = labels_tensor(bs);
    auto xt = images_tensor(bt);
    auto fs_ = model->forward(xs, SampleMode::kSampled, gen);
    auto ft = model->forward(xt, SampleMode::kSampled, gen);
    return stage_loss_sa({xs, ys, fs_}, {xt, ft}, *model->basis_bank, cfg.weights, cfg.prior);
  };
  loop.validate = [&] { return mean_dice(model_predictor(model), target.val, static_cast<int>(mc.num_classes)); };
  loop.higher_is_better = true;
  return loop.run();
}

TrainResult train_source_free_stage1(const TrainConfig& cfg, const ModelConfig& mc, const SourceData& source,
                                     const fs::path& out_dir, const std::optional<fs::path>& resume) {
  if (cfg.mode != TrainMode::kSF1) throw ConfigError("train_source_free_stage1 needs mode sf1");
  mc.validate();
  cfg.validate(mc.num_bases);
  require_nonempty(source.train, "source train split");
  require_nonempty(source.val, "source val split");
  require_labeled(source.train, "source train");
  require_labeled(source.val, "source val");
  configure_threads(cfg);

  torch::manual_seed(cfg.seed);
  Model model(mc);
  auto opt = make_model_adamw(*model, cfg);
  auto gen = make_generator(cfg.seed);
  auto meta = fresh_meta("udaseg", cfg, mc);
  if (resume) {
    auto raw = read_raw(*resume);
    resume_from(raw, meta, *model, *opt, gen, "sf1");
  }

  Loop loop{cfg, out_dir, meta, *model, *opt, gen};
  loop.steps_per_epoch = steps_for(source.train.size(), cfg.batch_source);
  loop.compute = [&](int64_t epoch, int64_t i) {
    const auto ps = permutation(cfg.seed, 2 * static_cast<uint64_t>(epoch), source.train.size());
    const auto bs = pick(source.train, ps, static_cast<std::size_t>(i * cfg.batch_source), static_cast<std::size_t>(cfg.batch_source));
    auto xs = images_tensor(bs);
    auto ys = labels_tensor(bs);
    auto fs_ = model->forward(xs, SampleMode::kSampled, gen);
    return stage_loss_sf1({xs, ys, fs_}, *model->basis_bank, cfg.weights, cfg.prior);
  };
  loop.validate = [&] { return mean_dice(model_predictor(model), source.val, static_cast<int>(mc.num_classes)); };
  loop.higher_is_better = true;
  return loop.run();
}

TrainResult train_source_free_stage2(const TrainConfig& cfg, const TargetData& target, const fs::path& checkpoint,
                                     const fs::path& out_dir) {
  if (cfg.mode != TrainMode::kSF2) throw ConfigError("train_source_free_stage2 needs mode sf2");
  require_nonempty(target.train, "target train split");
  require_nonempty(target.val, "target val split");
  if (cfg.sf2_select_by_dice) require_labeled(target.val, "target val");
  configure_threads(cfg);

  auto raw = read_raw(checkpoint);
  if (raw.meta.kind != "udaseg" || (raw.meta.mode != "sf1" && raw.meta.mode != "sf2")) {
    throw ConfigError("stage two needs a stage-one (sf1) or stage-two (sf2) checkpoint, got '" + raw.meta.mode + "'");
  }
  const auto mc = raw.meta.model;
  cfg.validate(mc.num_bases);

  torch::manual_seed(cfg.seed);
  Model model(mc);
  for (const auto& g : kFrozenInStage2) {
    for (auto& p : model->group_parameters(g)) p.set_requires_grad(false);
  }
  // Frozen groups are never handed to the optimizer.
  auto opt = make_model_adamw(*model, cfg, kFrozenInStage2);
  auto gen = make_generator(cfg.seed);
  auto meta = fresh_meta("udaseg", cfg, mc);
  std::map<std::string, uint64_t> frozen_before;
  if (raw.meta.mode == "sf1") {
    load_params(*model, raw.model);
    meta.train_config = json{{"stage1", json::parse(raw.meta.train_config)},
                             {"stage2", json::parse(train_config_json(cfg))}}
                            .dump();
    meta.config_hash = config_hash(model_config_json(mc), meta.train_config);
  } else {
    meta.train_config = json::parse(raw.meta.train_config).dump();
    meta.config_hash = raw.meta.config_hash;
    resume_from(raw, meta, *model, *opt, gen, "sf2");
  }
  for (const auto& g : kFrozenInStage2) frozen_before[g] = group_checksum(*model, g);

  Loop loop{cfg, out_dir, meta, *model, *opt, gen};
  loop.steps_per_epoch = steps_for(target.train.size(), cfg.batch_target);
  loop.compute = [&](int64_t epoch, int64_t i) {
    const auto pt = permutation(cfg.seed, 2 * static_cast<uint64_t>(epoch) + 1, target.train.size());
    const auto bt = pick(target.train, pt, static_cast<std::size_t>(i * cfg.batch_target), static_cast<std::size_t>(cfg.batch_target));
    auto xt = images_tensor(bt);
    auto ft = model->forward(xt, SampleMode::kSampled, gen);
    return stage_loss_sf2({xt, ft}, cfg.weights, cfg.prior);
  };
  loop.after_backward = [&] { assert_frozen(*model, kFrozenInStage2); };
  if (cfg.sf2_select_by_dice) {
    loop.validate = [&] { return mean_dice(model_predictor(model), target.val, static_cast<int>(mc.num_classes)); };
    loop.higher_is_better = true;
  } else {
    loop.validate = [&] { return target_recon_nll(model, target.val); };
    loop.higher_is_better = false;
  }
  auto res = loop.run();

  json check;
  bool intact = true;
  for (const auto& g : kFrozenInStage2) {
    const auto after = group_checksum(*model, g);
    check[g] = {{"before", hex64(frozen_before[g])}, {"after", hex64(after)}};
    intact = intact && after == frozen_before[g];
  }
  check["intact"] = intact;
  std::ofstream(out_dir / "freeze_check.json") << check.dump(2) << "\n";
  if (!intact) throw InvariantViolation("frozen parameter groups changed during stage two");
  return res;
}

TrainResult train_baseline(const TrainConfig& cfg, const ModelConfig& mc, const SourceData& source,
                           const fs::path& out_dir, const std::optional<fs::path>& resume) {
  if (cfg.mode != TrainMode::kBaseline) throw ConfigError("train_baseline needs mode baseline");
  mc.validate();
  cfg.validate(mc.num_bases);
  require_nonempty(source.train, "source train split");
  require_nonempty(source.val, "source val split");
  require_labeled(source.train, "source train");
  require_labeled(source.val, "source val");
  configure_threads(cfg);

  torch::manual_seed(cfg.seed);
  AttentionUNet net(mc);
  auto opt = make_adamw(net->parameters(), cfg);
  auto gen = make_generator(cfg.seed);
  auto meta = fresh_meta("baseline", cfg, mc);
  if (resume) {
    auto raw = read_raw(*resume);
    resume_from(raw, meta, *net, *opt, gen, "baseline");
  }

  Loop loop{cfg, out_dir, meta, *net, *opt, gen};
  loop.steps_per_epoch = steps_for(source.train.size(), cfg.batch_source);
  loop.compute = [&](int64_t epoch, int64_t i) {
    const auto ps = permutation(cfg.seed, 2 * static_cast<uint64_t>(epoch), source.train.size());
    const auto bs = pick(source.train, ps, static_cast<std::size_t>(i * cfg.batch_source), static_cast<std::size_t>(cfg.batch_source));
    auto xs = images_tensor(bs);
    auto ys = labels_tensor(bs);
    LossReport r;
    r.objective = seg_loss(net->forward(xs), ys).mean();
    r.seg = r.objective.item<double>();
    r.total = r.seg;
    return r;
  };
  loop.validate = [&] { return mean_dice(unet_predictor(net), source.val, static_cast<int>(mc.num_classes)); };
  loop.higher_is_better = true;
  return loop.run();
}

}  // namespace udaseg
