#include "udaseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include <json.hpp>
#include <torch/torch.h>

#include "udaseg/errors.hpp"
#include "udaseg/png_io.hpp"
#include "udaseg/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace udaseg {
namespace {

struct Topology {
  bool cavity;
  bool myocardium;
  int rv_sides;  // bit 0: left, bit 1: right
};

// Structure-present/absent patterns; the first `topology_variants` are used.
constexpr std::array<Topology, kMaxTopologyVariants> kTopologies{{
    {true, true, 0b01},
    {true, true, 0b10},
    {true, true, 0b00},
    {true, false, 0b01},
    {true, true, 0b11},
    {false, true, 0b10},
}};

constexpr uint64_t kAppearanceBit = uint64_t{1} << 63;

double bilinear_grid(const std::vector<double>& grid, int g, int offset, double gx, double gy) {
  gx = std::clamp(gx, 0.0, static_cast<double>(g - 1));
  gy = std::clamp(gy, 0.0, static_cast<double>(g - 1));
  const int x0 = std::min(static_cast<int>(gx), g - 2);
  const int y0 = std::min(static_cast<int>(gy), g - 2);
  const double fx = gx - x0;
  const double fy = gy - y0;
  auto at = [&](int y, int x) { return grid[offset + y * g + x]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

double sq(double v) { return v * v; }

/// Label and tissue index at an image-space point. Tissue: 0 outside body,
/// 1 body, 1 + c for foreground class c.
std::pair<int, int> classify(const GeneratorConfig& cfg, const Anatomy& a, double qx, double qy) {
  const double w = cfg.width;
  const double h = cfg.height;
  const int g = a.elastic_grid;
  const double gx = qx / w * (g - 1);
  const double gy = qy / h * (g - 1);
  const double ex = bilinear_grid(a.elastic, g, 0, gx, gy);
  const double ey = bilinear_grid(a.elastic, g, g * g, gx, gy);
  const double cx = w / 2.0;
  const double cy = h / 2.0;
  const double dx = qx + ex - cx - a.shift_x;
  const double dy = qy + ey - cy - a.shift_y;
  const double c = std::cos(-a.rotation);
  const double s = std::sin(-a.rotation);
  const double px = cx + (c * dx - s * dy) / a.scale;
  const double py = cy + (s * dx + c * dy) / a.scale;

  const auto& topo = kTopologies[static_cast<std::size_t>(a.variant)];
  const double t = a.myo_thickness;
  const double d_cav = sq((px - a.lv_x) / a.lv_rx) + sq((py - a.lv_y) / a.lv_ry);
  const double d_myo = sq((px - a.lv_x) / (a.lv_rx + t)) + sq((py - a.lv_y) / (a.lv_ry + t));
  const double d_excl =
      sq((px - a.lv_x) / (a.lv_rx + t + 1.0)) + sq((py - a.lv_y) / (a.lv_ry + t + 1.0));

  int label = 0;
  if (topo.myocardium && d_myo <= 1.0) {
    label = (topo.cavity && d_cav <= 1.0) ? 2 : 1;
  } else if (!topo.myocardium && topo.cavity && d_cav <= 1.0) {
    label = 2;
  } else if (d_excl > 1.0) {
    for (int side = 0; side < 2; ++side) {
      if (!(topo.rv_sides & (1 << side))) continue;
      const double dir = side == 0 ? -1.0 : 1.0;
      const double rx = a.lv_x + dir * (a.lv_rx + t + 0.55 * a.rv_rx);
      const double ry = a.lv_y + a.rv_dy;
      if (sq((px - rx) / a.rv_rx) + sq((py - ry) / a.rv_ry) <= 1.0) label = 3;
    }
  }
  if (label > cfg.num_classes) label = 0;
  if (label > 0) return {label, 1 + label};
  const bool in_body = sq((px - cx) / a.body_rx) + sq((py - cy) / a.body_ry) <= 1.0;
  return {0, in_body ? 1 : 0};
}

json style_json(const DomainStyle& s) {
  return {{"intensities", s.intensities},
          {"gamma", s.gamma},
          {"noise_sd", s.noise_sd},
          {"bias_amplitude", s.bias_amplitude}};
}

std::string split_prefix(const std::string& name) {
  std::string p;
  for (char ch : name) {
    if (ch == '_') {
      p += '-';
    } else {
      p += ch;
    }
  }
  return p;
}

[[noreturn]] void schema_error(const fs::path& manifest, const std::string& field,
                               const std::string& what) {
  throw DataError("manifest '" + manifest.string() + "': field '" + field + "' " + what);
}

void min_max_normalize(std::vector<float>& img) {
  if (img.empty()) return;
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const float mn = *lo;
  const float mx = *hi;
  if (!(mx > mn)) {
    std::cerr << "warning: constant image normalized to zeros\n";
    std::fill(img.begin(), img.end(), 0.0f);
    return;
  }
  for (float& v : img) v = (v - mn) / (mx - mn);
}

int resampled_extent(int n, double spacing, double target) {
  return std::max(1, static_cast<int>(std::lround(n * spacing / target)));
}

template <typename T, typename Sampler>
std::vector<T> resample_and_crop(int height, int width, std::array<double, 2> spacing,
                                 double target_spacing, int crop_h, int crop_w, Sampler sample) {
  if (!(spacing[0] > 0 && spacing[1] > 0 && target_spacing > 0)) {
    throw DomainError("preprocess: spacings must be > 0");
  }
  if (crop_h <= 0 || crop_w <= 0) throw DomainError("preprocess: crop size must be > 0");
  const int rh = resampled_extent(height, spacing[0], target_spacing);
  const int rw = resampled_extent(width, spacing[1], target_spacing);
  const double sy = static_cast<double>(height) / rh;
  const double sx = static_cast<double>(width) / rw;
  std::vector<T> out(static_cast<std::size_t>(crop_h) * crop_w, T{});
  const int off_y = (rh - crop_h) / 2;
  const int off_x = (rw - crop_w) / 2;
  for (int y = 0; y < crop_h; ++y) {
    const int ry = y + off_y;
    if (ry < 0 || ry >= rh) continue;
    for (int x = 0; x < crop_w; ++x) {
      const int rx = x + off_x;
      if (rx < 0 || rx >= rw) continue;
      out[static_cast<std::size_t>(y) * crop_w + x] = sample((ry + 0.5) * sy - 0.5, (rx + 0.5) * sx - 0.5);
    }
  }
  return out;
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw DataError("unknown domain '" + s + "'");
}

void GeneratorConfig::validate() const {
  std::ostringstream err;
  if (height < 8 || width < 8) err << "image size must be >= 8; ";
  if (num_classes < 1 || num_classes > 3) err << "num_classes must be in 1..3; ";
  if (topology_variants < 1 || topology_variants > kMaxTopologyVariants) {
    err << "topology_variants must be in 1.." << kMaxTopologyVariants << "; ";
  }
  if (!(spacing > 0)) err << "spacing must be > 0; ";
  for (const auto* s : {&source, &target}) {
    if (s->intensities.size() != static_cast<std::size_t>(2 + num_classes)) {
      err << "domain intensities need 2 + K entries; ";
    }
    if (!(s->gamma > 0)) err << "gamma must be > 0; ";
    if (s->noise_sd < 0 || s->bias_amplitude < 0) err << "noise and bias must be >= 0; ";
  }
  for (int c : {source_train, source_val, target_train, target_val, target_test}) {
    if (c < 1) {
      err << "split counts must be >= 1; ";
      break;
    }
  }
  if (!err.str().empty()) throw ConfigError("generator config: " + err.str());
}

Anatomy draw_anatomy(const GeneratorConfig& cfg, uint64_t key) {
  CounterRng r(cfg.seed, key);
  const double s0 = std::min(cfg.height, cfg.width) / 64.0;
  Anatomy a;
  a.variant = static_cast<int>(r.below(static_cast<uint64_t>(cfg.topology_variants)));
  a.lv_x = cfg.width / 2.0 + r.normal(0.0, 1.5) * s0;
  a.lv_y = cfg.height / 2.0 + r.normal(0.0, 1.5) * s0;
  a.lv_rx = r.uniform(6.5, 9.5) * s0;
  a.lv_ry = r.uniform(6.5, 9.5) * s0;
  a.myo_thickness = r.uniform(2.5, 4.0) * s0;
  a.rv_rx = r.uniform(5.0, 7.5) * s0;
  a.rv_ry = r.uniform(8.0, 12.0) * s0;
  a.rv_dy = r.uniform(-3.0, 3.0) * s0;
  a.body_rx = r.uniform(24.0, 29.0) * s0;
  a.body_ry = r.uniform(19.0, 25.0) * s0;
  a.rotation = r.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
  a.scale = 1.0 + r.uniform(-cfg.scale_jitter, cfg.scale_jitter);
  a.shift_x = r.uniform(-cfg.max_shift, cfg.max_shift) * s0;
  a.shift_y = r.uniform(-cfg.max_shift, cfg.max_shift) * s0;
  a.elastic_grid = 5;
  a.elastic.resize(2 * 25);
  for (double& e : a.elastic) e = r.normal(0.0, cfg.elastic_amplitude) * s0;
  return a;
}

Sample render_sample(const GeneratorConfig& cfg, const Anatomy& anatomy, const DomainStyle& style,
                     uint64_t key) {
  const int h = cfg.height;
  const int w = cfg.width;
  Sample s;
  s.height = h;
  s.width = w;
  s.spacing = {cfg.spacing, cfg.spacing};
  s.image.assign(static_cast<std::size_t>(h) * w, 0.0f);
  s.label.assign(static_cast<std::size_t>(h) * w, 0);

  CounterRng r(cfg.seed, key | kAppearanceBit);
  constexpr int kBiasGrid = 3;
  std::vector<double> bias(kBiasGrid * kBiasGrid);
  for (double& b : bias) b = r.uniform(-1.0, 1.0);

  std::vector<double> img(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      s.label[i] = static_cast<uint8_t>(classify(cfg, anatomy, x + 0.5, y + 0.5).first);
      double acc = 0.0;
      for (double oy : {0.25, 0.75}) {
        for (double ox : {0.25, 0.75}) {
          const int tissue = classify(cfg, anatomy, x + ox, y + oy).second;
          acc += style.intensities[static_cast<std::size_t>(tissue)];
        }
      }
      double v = std::pow(std::max(acc / 4.0, 0.0), style.gamma);
      const double field = bilinear_grid(bias, kBiasGrid, 0, static_cast<double>(x) / (w - 1) * (kBiasGrid - 1),
                                         static_cast<double>(y) / (h - 1) * (kBiasGrid - 1));
      v *= 1.0 + style.bias_amplitude * field;
      v += style.noise_sd * r.normal();
      img[i] = std::clamp(v, 0.0, 1.0);
    }
  }
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double mn = *lo;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double n = range > 0 ? (img[i] - mn) / range : 0.0;
    // Stored as 16-bit; keep the in-memory value on the same lattice.
    s.image[i] = static_cast<float>(std::lround(n * 65535.0)) / 65535.0f;
  }
  return s;
}

std::vector<SplitSpec> default_splits(const GeneratorConfig& cfg) {
  return {{"source_train", Domain::kSource, cfg.source_train, true},
          {"source_val", Domain::kSource, cfg.source_val, true},
          {"target_train", Domain::kTarget, cfg.target_train, false},
          {"target_val", Domain::kTarget, cfg.target_val, true},
          {"target_test", Domain::kTarget, cfg.target_test, true}};
}

std::vector<std::pair<SplitSpec, std::vector<Sample>>> generate_in_memory(const GeneratorConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<SplitSpec, std::vector<Sample>>> out;
  const auto splits = default_splits(cfg);
  for (std::size_t si = 0; si < splits.size(); ++si) {
    const auto& spec = splits[si];
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) {
      const uint64_t key = (static_cast<uint64_t>(si + 1) << 32) | static_cast<uint64_t>(i);
      const auto anatomy = draw_anatomy(cfg, key);
      const auto& style = spec.domain == Domain::kSource ? cfg.source : cfg.target;
      auto s = render_sample(cfg, anatomy, style, key);
      std::ostringstream id;
      id << split_prefix(spec.name) << "-" << std::setw(4) << std::setfill('0') << i;
      s.id = id.str();
      s.subject = s.id;
      s.domain = spec.domain;
      if (!spec.labeled) s.label.clear();
      samples.push_back(std::move(s));
    }
    out.emplace_back(spec, std::move(samples));
  }
  return out;
}

uint64_t dataset_checksum(const std::vector<std::pair<SplitSpec, std::vector<Sample>>>& data) {
  uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [spec, samples] : data) {
    feed(spec.name.data(), spec.name.size());
    for (const auto& s : samples) {
      feed(s.id.data(), s.id.size());
      feed(s.image.data(), s.image.size() * sizeof(float));
      feed(s.label.data(), s.label.size());
    }
  }
  return h;
}

void generate(const GeneratorConfig& cfg, const fs::path& out_dir) {
  const auto data = generate_in_memory(cfg);
  try {
    fs::create_directories(out_dir);
    for (const auto& [spec, samples] : data) {
      const auto dir = out_dir / spec.name;
      fs::create_directories(dir / "images");
      if (spec.labeled) fs::create_directories(dir / "labels");
      json manifest{{"format", "udaseg-split"},
                    {"version", 1},
                    {"split", spec.name},
                    {"domain", to_string(spec.domain)},
                    {"num_classes", cfg.num_classes},
                    {"height", cfg.height},
                    {"width", cfg.width}};
      json rows = json::array();
      for (const auto& s : samples) {
        std::vector<uint16_t> px(s.image.size());
        for (std::size_t i = 0; i < px.size(); ++i) {
          px[i] = static_cast<uint16_t>(std::lround(s.image[i] * 65535.0f));
        }
        const auto image_rel = "images/" + s.id + ".png";
        png::write_gray16(dir / image_rel, s.width, s.height, px);
        json row{{"id", s.id},
                 {"subject", s.subject},
                 {"image", image_rel},
                 {"spacing", {s.spacing[0], s.spacing[1]}}};
        if (s.labeled()) {
          const auto label_rel = "labels/" + s.id + ".png";
          png::write_gray8(dir / label_rel, s.width, s.height, s.label);
          row["label"] = label_rel;
        } else {
          row["label"] = nullptr;
        }
        rows.push_back(row);
      }
      manifest["samples"] = rows;
      std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    }
    std::ostringstream checksum;
    checksum << std::hex << std::setw(16) << std::setfill('0') << dataset_checksum(data);
    json root{{"format", "udaseg-dataset"},
              {"version", 1},
              {"rng", "counter-splitmix64"},
              {"rng_version", CounterRng::kVersion},
              {"checksum", checksum.str()},
              {"generator",
               {{"height", cfg.height},
                {"width", cfg.width},
                {"num_classes", cfg.num_classes},
                {"topology_variants", cfg.topology_variants},
                {"spacing", cfg.spacing},
                {"elastic_amplitude", cfg.elastic_amplitude},
                {"max_rotation_deg", cfg.max_rotation_deg},
                {"scale_jitter", cfg.scale_jitter},
                {"max_shift", cfg.max_shift},
                {"source", style_json(cfg.source)},
                {"target", style_json(cfg.target)},
                {"seed", cfg.seed}}}};
    json splits = json::array();
    for (const auto& [spec, samples] : data) splits.push_back(spec.name);
    root["splits"] = splits;
    std::ofstream os(out_dir / "dataset.json");
    os << root.dump(2) << "\n";
    if (!os) throw IoError("cannot write '" + (out_dir / "dataset.json").string() + "'");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("dataset generation failed: ") + e.what());
  }
}

std::vector<Sample> load_split(const fs::path& split_dir, const LoadOptions& opts) {
  const auto manifest_path = split_dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    std::cerr << "warning: no manifest in '" << split_dir.string() << "'; split is empty\n";
    return {};
  }
  json m;
  try {
    std::ifstream is(manifest_path);
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  if (!m.is_object()) schema_error(manifest_path, "<root>", "must be an object");
  if (!m.contains("version") || !m["version"].is_number_integer() || m["version"].get<int>() != 1) {
    schema_error(manifest_path, "version", "must be the integer 1");
  }
  if (!m.contains("domain") || !m["domain"].is_string()) {
    schema_error(manifest_path, "domain", "must be \"source\" or \"target\"");
  }
  Domain domain;
  try {
    domain = parse_domain(m["domain"].get<std::string>());
  } catch (const DataError&) {
    schema_error(manifest_path, "domain", "must be \"source\" or \"target\"");
  }
  if (!m.contains("num_classes") || !m["num_classes"].is_number_integer()) {
    schema_error(manifest_path, "num_classes", "must be an integer");
  }
  const int num_classes = m["num_classes"].get<int>();
  if (!m.contains("samples") || !m["samples"].is_array()) {
    schema_error(manifest_path, "samples", "must be an array");
  }

  std::vector<Sample> out;
  const auto& rows = m["samples"];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const auto field = [&](const char* name) {
      return "samples[" + std::to_string(i) + "]." + name;
    };
    if (!row.is_object()) schema_error(manifest_path, "samples[" + std::to_string(i) + "]", "must be an object");
    for (const char* key : {"id", "subject", "image"}) {
      if (!row.contains(key) || !row[key].is_string()) schema_error(manifest_path, field(key), "must be a string");
    }
    if (!row.contains("spacing") || !row["spacing"].is_array() || row["spacing"].size() != 2 ||
        !row["spacing"][0].is_number() || !row["spacing"][1].is_number() ||
        !(row["spacing"][0].get<double>() > 0) || !(row["spacing"][1].get<double>() > 0)) {
      schema_error(manifest_path, field("spacing"), "must be two positive numbers");
    }
    Sample s;
    s.id = row["id"].get<std::string>();
    s.subject = row["subject"].get<std::string>();
    s.domain = domain;
    s.spacing = {row["spacing"][0].get<double>(), row["spacing"][1].get<double>()};
    const auto img = png::read_gray(split_dir / row["image"].get<std::string>());
    s.height = img.height;
    s.width = img.width;
    const float denom = img.bit_depth == 16 ? 65535.0f : 255.0f;
    s.image.resize(img.pixels.size());
    for (std::size_t k = 0; k < img.pixels.size(); ++k) s.image[k] = static_cast<float>(img.pixels[k]) / denom;

    const bool has_label = row.contains("label") && !row["label"].is_null();
    if (has_label) {
      if (!row["label"].is_string()) schema_error(manifest_path, field("label"), "must be a string or null");
      const auto lab = png::read_gray(split_dir / row["label"].get<std::string>());
      if (lab.width != img.width || lab.height != img.height) {
        throw DataError("label size differs from image for sample '" + s.id + "'");
      }
      s.label.resize(lab.pixels.size());
      for (std::size_t k = 0; k < lab.pixels.size(); ++k) {
        if (lab.pixels[k] > num_classes) {
          throw DataError("label value outside 0..K in sample '" + s.id + "'");
        }
        s.label[k] = static_cast<uint8_t>(lab.pixels[k]);
      }
    } else if (domain == Domain::kSource) {
      throw DataError("source sample '" + s.id + "' has no label (field '" + field("label") + "')");
    }

    const int th = opts.height > 0 ? opts.height : s.height;
    const int tw = opts.width > 0 ? opts.width : s.width;
    const double ts = opts.target_spacing > 0 ? opts.target_spacing : s.spacing[0];
    const bool same_grid = th == s.height && tw == s.width && ts == s.spacing[0] && ts == s.spacing[1];
    if (!same_grid) {
      s.image = preprocess(s.image, s.height, s.width, s.spacing, ts, th, tw);
      if (s.labeled()) s.label = preprocess_label(s.label, s.height, s.width, s.spacing, ts, th, tw);
      s.height = th;
      s.width = tw;
      s.spacing = {ts, ts};
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<float> preprocess(const std::vector<float>& image, int height, int width,
                              std::array<double, 2> spacing, double target_spacing, int crop_h,
                              int crop_w) {
  if (image.size() != static_cast<std::size_t>(height) * width) throw DimensionError("preprocess: size");
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return static_cast<double>(image[static_cast<std::size_t>(y) * width + x]);
  };
  auto out = resample_and_crop<float>(height, width, spacing, target_spacing, crop_h, crop_w,
                                      [&](double sy, double sx) {
                                        const int y0 = static_cast<int>(std::floor(sy));
                                        const int x0 = static_cast<int>(std::floor(sx));
                                        const double fy = sy - y0;
                                        const double fx = sx - x0;
                                        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                                                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                                        return static_cast<float>(v);
                                      });
  min_max_normalize(out);
  return out;
}

std::vector<uint8_t> preprocess_label(const std::vector<uint8_t>& label, int height, int width,
                                      std::array<double, 2> spacing, double target_spacing,
                                      int crop_h, int crop_w) {
  if (label.size() != static_cast<std::size_t>(height) * width) throw DimensionError("preprocess: size");
  return resample_and_crop<uint8_t>(height, width, spacing, target_spacing, crop_h, crop_w,
                                    [&](double sy, double sx) {
                                      const int y = std::clamp(static_cast<int>(std::lround(sy)), 0, height - 1);
                                      const int x = std::clamp(static_cast<int>(std::lround(sx)), 0, width - 1);
                                      return label[static_cast<std::size_t>(y) * width + x];
                                    });
}

torch::Tensor images_tensor(const std::vector<Sample>& samples) {
  if (samples.empty()) return torch::empty({0, 1, 0, 0});
  const auto h = samples.front().height;
  const auto w = samples.front().width;
  auto t = torch::empty({static_cast<int64_t>(samples.size()), 1, h, w});
  auto acc = t.accessor<float, 4>();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = samples[n];
    if (s.height != h || s.width != w) throw DimensionError("samples have differing sizes");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc[n][0][y][x] = s.image[static_cast<std::size_t>(y) * w + x];
  }
  return t;
}

torch::Tensor labels_tensor(const std::vector<Sample>& samples) {
  if (samples.empty()) return torch::empty({0, 0, 0}, torch::kLong);
  const auto h = samples.front().height;
  const auto w = samples.front().width;
  auto t = torch::empty({static_cast<int64_t>(samples.size()), h, w}, torch::kLong);
  auto acc = t.accessor<int64_t, 3>();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = samples[n];
    if (!s.labeled()) throw DataError("sample '" + s.id + "' has no label");
    if (s.height != h || s.width != w) throw DimensionError("samples have differing sizes");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc[n][y][x] = s.label[static_cast<std::size_t>(y) * w + x];
  }
  return t;
}

}  // namespace udaseg
