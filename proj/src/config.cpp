#include "udaseg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "udaseg/errors.hpp"

namespace fs = std::filesystem;

namespace udaseg {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_int(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0") {
    out = false;
    return true;
  }
  return false;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

using Setter = std::function<std::string(ExperimentConfig&, const std::string&)>;

Setter int_key(std::function<void(ExperimentConfig&, int64_t)> set) {
  return [set](ExperimentConfig& c, const std::string& v) -> std::string {
    int64_t x = 0;
    if (!parse_int(v, x)) return "expected an integer, got '" + v + "'";
    set(c, x);
    return "";
  };
}

Setter real_key(std::function<void(ExperimentConfig&, double)> set) {
  return [set](ExperimentConfig& c, const std::string& v) -> std::string {
    double x = 0;
    if (!parse_double(v, x)) return "expected a number, got '" + v + "'";
    set(c, x);
    return "";
  };
}

Setter bool_key(std::function<void(ExperimentConfig&, bool)> set) {
  return [set](ExperimentConfig& c, const std::string& v) -> std::string {
    bool x = false;
    if (!parse_bool(v, x)) return "expected true or false, got '" + v + "'";
    set(c, x);
    return "";
  };
}

Setter real_list_key(std::size_t n, std::function<void(ExperimentConfig&, std::vector<double>)> set) {
  return [n, set](ExperimentConfig& c, const std::string& v) -> std::string {
    std::vector<double> xs;
    for (const auto& item : split_list(v)) {
      double x = 0;
      if (!parse_double(item, x)) return "expected a comma-separated list of numbers, got '" + v + "'";
      xs.push_back(x);
    }
    if (n > 0 && xs.size() != n) return "expected " + std::to_string(n) + " values, got " + std::to_string(xs.size());
    set(c, std::move(xs));
    return "";
  };
}

struct KeySpec {
  std::string name;
  std::string doc;
  Setter set;
};

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = [] {
    std::vector<KeySpec> t;
    auto add = [&t](std::string n, std::string d, Setter s) { t.push_back({std::move(n), std::move(d), std::move(s)}); };
    add("config.version", "schema version; must be 1", int_key([](auto&, int64_t) {}));
    add("seed", "global seed for data, initialisation and sampling", int_key([](auto& c, int64_t v) {
          c.seed = static_cast<uint64_t>(v);
          c.train.seed = c.seed;
          c.generator.seed = c.seed;
        }));
    add("output.root", "directory receiving run folders", [](auto& c, const std::string& v) -> std::string {
      c.output_root = v;
      return "";
    });
    add("data.root", "dataset root produced by generate-data", [](auto& c, const std::string& v) -> std::string {
      c.data_root = v;
      return "";
    });

    add("model.height", "input height in pixels", int_key([](auto& c, int64_t v) { c.model.image_height = v; }));
    add("model.width", "input width in pixels", int_key([](auto& c, int64_t v) { c.model.image_width = v; }));
    add("model.levels", "number of hierarchical scales L", int_key([](auto& c, int64_t v) { c.model.num_levels = v; }));
    add("model.velocity_levels", "comma-separated 1-based scales carrying a velocity field (ascending)",
        [](auto& c, const std::string& v) -> std::string {
          std::vector<int64_t> xs;
          for (const auto& item : split_list(v)) {
            int64_t x = 0;
            if (!parse_int(item, x)) return "expected a comma-separated list of integers, got '" + v + "'";
            xs.push_back(x);
          }
          c.model.velocity_levels = xs;
          return "";
        });
    add("model.bases", "number of anatomical bases M", int_key([](auto& c, int64_t v) { c.model.num_bases = v; }));
    add("model.classes", "foreground classes K", int_key([](auto& c, int64_t v) { c.model.num_classes = v; }));
    add("model.latent_channels", "channels C_l of every latent scale",
        int_key([](auto& c, int64_t v) { c.model.latent_channels = v; }));
    add("model.base_width", "encoder width at full resolution", int_key([](auto& c, int64_t v) { c.model.base_width = v; }));
    add("model.max_width", "encoder width cap", int_key([](auto& c, int64_t v) { c.model.max_width = v; }));
    add("model.registration_width", "registration network width",
        int_key([](auto& c, int64_t v) { c.model.registration_width = v; }));
    add("model.decoder_width", "decoder width", int_key([](auto& c, int64_t v) { c.model.decoder_width = v; }));
    add("model.basis_init_variance", "initial variance of every basis element",
        real_key([](auto& c, double v) { c.model.basis_init_variance = v; }));
    add("model.squaring_steps", "scaling-and-squaring steps",
        int_key([](auto& c, int64_t v) { c.model.squaring_steps = static_cast<int>(v); }));

    add("train.batch_source", "source images per step", int_key([](auto& c, int64_t v) { c.train.batch_source = static_cast<int>(v); }));
    add("train.batch_target", "target images per step", int_key([](auto& c, int64_t v) { c.train.batch_target = static_cast<int>(v); }));
    add("train.lambdas", "lambda_1..lambda_5: seg, recon, vel, tem, struct",
        real_list_key(5, [](auto& c, std::vector<double> v) {
          const double tau = c.train.weights.tau;
          const bool usage = c.train.weights.usage_enabled;
          c.train.weights = LossWeights::from_list({v[0], v[1], v[2], v[3], v[4]}, tau);
          c.train.weights.usage_enabled = usage;
        }));
    for (const char* mode : {"sa", "sf1", "sf2", "baseline"}) {
      const std::string md = mode;
      add("train.lambdas_" + md, "lambda override for mode " + md,
          real_list_key(5, [md](auto& c, std::vector<double> v) {
            c.lambdas_by_mode[md] = {v[0], v[1], v[2], v[3], v[4]};
          }));
      add("train.epochs_" + md, "epoch override for mode " + md,
          int_key([md](auto& c, int64_t v) { c.epochs_by_mode[md] = static_cast<int>(v); }));
    }
    add("train.tau", "usage threshold, in (0, 1/M]", real_key([](auto& c, double v) { c.train.weights.tau = v; }));
    add("train.usage", "enable the usage loss (false for the ablation)",
        bool_key([](auto& c, bool v) { c.train.weights.usage_enabled = v; }));
    add("train.velocity_smooth", "velocity prior smoothness precision",
        real_key([](auto& c, double v) { c.train.prior.smooth = v; }));
    add("train.velocity_magnitude", "velocity prior magnitude precision",
        real_key([](auto& c, double v) { c.train.prior.magnitude = v; }));
    add("train.lr", "AdamW learning rate", real_key([](auto& c, double v) { c.train.lr = v; }));
    add("train.weight_decay", "AdamW weight decay", real_key([](auto& c, double v) { c.train.weight_decay = v; }));
    add("train.basis_lr_scale", "learning-rate multiplier for the basis bank",
        real_key([](auto& c, double v) { c.train.basis_lr_scale = v; }));
    add("train.epochs", "training epochs", int_key([](auto& c, int64_t v) { c.train.epochs = static_cast<int>(v); }));
    add("train.val_every", "epochs between validations", int_key([](auto& c, int64_t v) { c.train.val_every = static_cast<int>(v); }));
    add("train.max_steps", "stop after this many steps (0: no limit)", int_key([](auto& c, int64_t v) { c.train.max_steps = v; }));
    add("train.sf2_selection", "stage-two model selection: nll or dsc",
        [](auto& c, const std::string& v) -> std::string {
          if (v == "nll") {
            c.train.sf2_select_by_dice = false;
          } else if (v == "dsc") {
            c.train.sf2_select_by_dice = true;
          } else {
            return "expected nll or dsc, got '" + v + "'";
          }
          return "";
        });

    add("gen.height", "generated image height", int_key([](auto& c, int64_t v) { c.generator.height = static_cast<int>(v); }));
    add("gen.width", "generated image width", int_key([](auto& c, int64_t v) { c.generator.width = static_cast<int>(v); }));
    add("gen.classes", "generated foreground classes (1..3)",
        int_key([](auto& c, int64_t v) { c.generator.num_classes = static_cast<int>(v); }));
    add("gen.variants", "topology variants in use (1..6)",
        int_key([](auto& c, int64_t v) { c.generator.topology_variants = static_cast<int>(v); }));
    add("gen.spacing", "pixel spacing in mm", real_key([](auto& c, double v) { c.generator.spacing = v; }));
    add("gen.elastic", "elastic control-point standard deviation (px)",
        real_key([](auto& c, double v) { c.generator.elastic_amplitude = v; }));
    add("gen.rotation", "maximum rotation (degrees)", real_key([](auto& c, double v) { c.generator.max_rotation_deg = v; }));
    add("gen.scale_jitter", "maximum relative scale change", real_key([](auto& c, double v) { c.generator.scale_jitter = v; }));
    add("gen.shift", "maximum shift (px)", real_key([](auto& c, double v) { c.generator.max_shift = v; }));
    for (const char* split : {"source_train", "source_val", "target_train", "target_val", "target_test"}) {
      const std::string s = split;
      add("gen." + s, "image count of split " + s, int_key([s](auto& c, int64_t v) {
            auto& g = c.generator;
            const int n = static_cast<int>(v);
            if (s == "source_train") g.source_train = n;
            if (s == "source_val") g.source_val = n;
            if (s == "target_train") g.target_train = n;
            if (s == "target_val") g.target_val = n;
            if (s == "target_test") g.target_test = n;
          }));
    }
    for (const char* domain : {"source", "target"}) {
      const std::string d = domain;
      auto style = [d](ExperimentConfig& c) -> DomainStyle& { return d == "source" ? c.generator.source : c.generator.target; };
      add("gen." + d + "_intensities", "outside, body, class 1..K intensities of the " + d + " domain",
          real_list_key(0, [style](auto& c, std::vector<double> v) { style(c).intensities = std::move(v); }));
      add("gen." + d + "_gamma", "gamma of the " + d + " domain", real_key([style](auto& c, double v) { style(c).gamma = v; }));
      add("gen." + d + "_noise", "noise standard deviation of the " + d + " domain",
          real_key([style](auto& c, double v) { style(c).noise_sd = v; }));
      add("gen." + d + "_bias", "bias-field amplitude of the " + d + " domain",
          real_key([style](auto& c, double v) { style(c).bias_amplitude = v; }));
    }
    return t;
  }();
  return table;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

ConfigErrors::ConfigErrors(std::vector<std::string> errors)
    : ConfigError([&] {
        std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                          (errors.size() == 1 ? "" : "s") + "):";
        for (const auto& e : errors) msg += "\n  - " + e;
        return msg;
      }()),
      errors_(std::move(errors)) {}

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const auto keys = [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : key_table()) out.emplace_back(k.name, k.doc);
    return out;
  }();
  return keys;
}

ExperimentConfig parse_config(const std::string& text, const ValidateOptions& opts) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  std::map<std::string, const KeySpec*> specs;
  for (const auto& k : key_table()) specs[k.name] = &k;

  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  // Lists like train.lambdas must be applied before train.tau/usage would be
  // overwritten, so values are collected first and applied in table order.
  std::map<std::string, std::pair<int, std::string>> values;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
      continue;
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!specs.count(key)) {
      errors.push_back("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      continue;
    }
    if (values.count(key)) {
      errors.push_back("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      continue;
    }
    values[key] = {lineno, value};
    cfg.raw[key] = value;
  }
  for (const auto& k : key_table()) {
    const auto it = values.find(k.name);
    if (it == values.end()) continue;
    const auto err = k.set(cfg, it->second.second);
    if (!err.empty()) errors.push_back("line " + std::to_string(it->second.first) + ": " + k.name + ": " + err);
  }
  if (const auto it = values.find("config.version"); it != values.end() && it->second.second != "1") {
    errors.push_back("config.version must be " + std::to_string(kConfigVersion));
  }

  // Range checks, reported together.
  const auto& m = cfg.model;
  if (m.num_levels < 1) errors.push_back("model.levels must be >= 1");
  if (m.num_bases < 2) errors.push_back("model.bases must be >= 2");
  if (m.num_classes < 1) errors.push_back("model.classes must be >= 1");
  if (m.velocity_levels.empty()) errors.push_back("model.velocity_levels must not be empty");
  for (std::size_t i = 0; i < m.velocity_levels.size(); ++i) {
    const auto l = m.velocity_levels[i];
    if (l < 1 || l > m.num_levels) {
      errors.push_back("model.velocity_levels: level " + std::to_string(l) + " outside 1..L (L = " +
                       std::to_string(m.num_levels) + ")");
    }
    if (i > 0 && l <= m.velocity_levels[i - 1]) {
      errors.push_back("model.velocity_levels must be strictly ascending");
    }
  }
  if (m.num_levels >= 1 && m.num_levels < 30) {
    const int64_t f = int64_t{1} << (m.num_levels - 1);
    if (m.image_height % f != 0 || m.image_width % f != 0) {
      errors.push_back("model.height and model.width must be divisible by 2^(L-1) = " + std::to_string(f));
    }
  }
  if (m.latent_channels < 1 || m.base_width < 1 || m.max_width < 1 || m.registration_width < 1 || m.decoder_width < 1) {
    errors.push_back("model widths must be >= 1");
  }
  if (m.squaring_steps < 1) errors.push_back("model.squaring_steps must be >= 1");
  if (!(m.basis_init_variance > 1e-6)) errors.push_back("model.basis_init_variance must be > 1e-6");

  const auto& t = cfg.train;
  const auto lambdas = t.weights.as_list();
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (lambdas[i] < 0) errors.push_back("train.lambdas: lambda_" + std::to_string(i + 1) + " must be >= 0");
  }
  if (m.num_bases >= 1 && (!(t.weights.tau > 0) || t.weights.tau > 1.0 / static_cast<double>(m.num_bases) + 1e-12)) {
    std::ostringstream os;
    os << "train.tau = " << t.weights.tau << " outside (0, 1/M] with M = " << m.num_bases
       << " (mean usages sum to 1, so tau > 1/M cannot be satisfied)";
    errors.push_back(os.str());
  }
  if (t.batch_source < 1 || t.batch_target < 1) errors.push_back("train batch sizes must be >= 1");
  if (!(t.lr > 0)) errors.push_back("train.lr must be > 0");
  if (t.weight_decay < 0) errors.push_back("train.weight_decay must be >= 0");
  if (!(t.basis_lr_scale > 0)) errors.push_back("train.basis_lr_scale must be > 0");
  if (t.epochs < 1) errors.push_back("train.epochs must be >= 1");
  for (const auto& [md, e] : cfg.epochs_by_mode) {
    if (e < 1) errors.push_back("train.epochs_" + md + " must be >= 1");
  }
  for (const auto& [md, l] : cfg.lambdas_by_mode) {
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (l[i] < 0) errors.push_back("train.lambdas_" + md + ": lambda_" + std::to_string(i + 1) + " must be >= 0");
    }
  }
  if (t.val_every < 1) errors.push_back("train.val_every must be >= 1");
  if (t.max_steps < 0) errors.push_back("train.max_steps must be >= 0");
  if (!(t.prior.smooth > 0) || !(t.prior.magnitude > 0)) errors.push_back("velocity prior precisions must be > 0");

  try {
    cfg.generator.validate();
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  if (cfg.generator.num_classes != m.num_classes) {
    errors.push_back("gen.classes must equal model.classes");
  }
  if (opts.check_paths && !cfg.data_root.empty() && !fs::is_directory(cfg.data_root)) {
    errors.push_back("data.root '" + cfg.data_root.string() + "' is not a directory");
  }
  if (!errors.empty()) throw ConfigErrors(std::move(errors));
  return cfg;
}

TrainConfig ExperimentConfig::train_for(TrainMode mode) const {
  TrainConfig t = train;
  t.mode = mode;
  const auto name = to_string(mode);
  if (const auto it = lambdas_by_mode.find(name); it != lambdas_by_mode.end()) {
    auto w = LossWeights::from_list(it->second, t.weights.tau);
    w.usage_enabled = t.weights.usage_enabled;
    t.weights = w;
  }
  if (const auto it = epochs_by_mode.find(name); it != epochs_by_mode.end()) t.epochs = it->second;
  return t;
}

ExperimentConfig validate_config(const fs::path& file, const ValidateOptions& opts) {
  std::ifstream is(file);
  if (!is) throw ConfigErrors({"cannot read config file '" + file.string() + "'"});
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), opts);
}

std::string dump_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& g = c.generator;
  os << "config.version = " << kConfigVersion << "\n";
  os << "seed = " << c.seed << "\n";
  os << "output.root = " << c.output_root.string() << "\n";
  if (!c.data_root.empty()) os << "data.root = " << c.data_root.string() << "\n";
  os << "model.height = " << m.image_height << "\nmodel.width = " << m.image_width << "\n";
  os << "model.levels = " << m.num_levels << "\nmodel.velocity_levels = ";
  for (std::size_t i = 0; i < m.velocity_levels.size(); ++i) os << (i ? "," : "") << m.velocity_levels[i];
  os << "\nmodel.bases = " << m.num_bases << "\nmodel.classes = " << m.num_classes << "\n";
  os << "model.latent_channels = " << m.latent_channels << "\nmodel.base_width = " << m.base_width << "\n";
  os << "model.max_width = " << m.max_width << "\nmodel.registration_width = " << m.registration_width << "\n";
  os << "model.decoder_width = " << m.decoder_width << "\nmodel.squaring_steps = " << m.squaring_steps << "\n";
  os << "model.basis_init_variance = " << m.basis_init_variance << "\n";
  const auto l = t.weights.as_list();
  os << "train.batch_source = " << t.batch_source << "\ntrain.batch_target = " << t.batch_target << "\n";
  os << "train.lambdas = " << join({l.begin(), l.end()}) << "\n";
  for (const auto& [md, v] : c.lambdas_by_mode) os << "train.lambdas_" << md << " = " << join(std::vector<double>(v.begin(), v.end())) << "\n";
  for (const auto& [md, e] : c.epochs_by_mode) os << "train.epochs_" << md << " = " << e << "\n";
  os << "train.tau = " << t.weights.tau << "\ntrain.usage = " << (t.weights.usage_enabled ? "true" : "false") << "\n";
  os << "train.velocity_smooth = " << t.prior.smooth << "\ntrain.velocity_magnitude = " << t.prior.magnitude << "\n";
  os << "train.lr = " << t.lr << "\ntrain.weight_decay = " << t.weight_decay << "\n";
  os << "train.basis_lr_scale = " << t.basis_lr_scale << "\n";
  os << "train.epochs = " << t.epochs << "\ntrain.val_every = " << t.val_every << "\n";
  os << "train.max_steps = " << t.max_steps << "\n";
  os << "train.sf2_selection = " << (t.sf2_select_by_dice ? "dsc" : "nll") << "\n";
  os << "gen.height = " << g.height << "\ngen.width = " << g.width << "\ngen.classes = " << g.num_classes << "\n";
  os << "gen.variants = " << g.topology_variants << "\ngen.spacing = " << g.spacing << "\n";
  os << "gen.elastic = " << g.elastic_amplitude << "\ngen.rotation = " << g.max_rotation_deg << "\n";
  os << "gen.scale_jitter = " << g.scale_jitter << "\ngen.shift = " << g.max_shift << "\n";
  os << "gen.source_train = " << g.source_train << "\ngen.source_val = " << g.source_val << "\n";
  os << "gen.target_train = " << g.target_train << "\ngen.target_val = " << g.target_val << "\n";
  os << "gen.target_test = " << g.target_test << "\n";
  for (const auto* d : {&g.source, &g.target}) {
    const std::string n = d == &g.source ? "source" : "target";
    os << "gen." << n << "_intensities = " << join(d->intensities) << "\n";
    os << "gen." << n << "_gamma = " << d->gamma << "\ngen." << n << "_noise = " << d->noise_sd << "\n";
    os << "gen." << n << "_bias = " << d->bias_amplitude << "\n";
  }
  return os.str();
}

}  // namespace udaseg
