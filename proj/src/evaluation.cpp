#include "udaseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "udaseg/errors.hpp"
#include "udaseg/png_io.hpp"

namespace fs = std::filesystem;

namespace udaseg {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher) over sample points
// at positions i * sp; f may hold +inf for "no seed".
void squared_edt_1d(const std::vector<double>& f, double sp, std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v;
  std::vector<double> z;
  v.reserve(n);
  z.reserve(n);
  auto inter = [&](int q, int p) {
    const double pq = sp * q;
    const double pp = sp * p;
    return ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2.0 * (pq - pp));
  };
  // z[i] is the left end of the interval where parabola v[i] is lowest.
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    double s = -kInf;
    while (!v.empty()) {
      s = inter(q, v.back());
      if (s > z.back()) break;
      v.pop_back();
      z.pop_back();
    }
    if (v.empty()) s = -kInf;
    v.push_back(q);
    z.push_back(s);
  }
  out.assign(n, kInf);
  if (v.empty()) return;
  std::size_t k = 0;
  for (int q = 0; q < n; ++q) {
    const double pos = sp * q;
    while (k + 1 < v.size() && z[k + 1] < pos) ++k;
    const double d = pos - sp * v[k];
    out[q] = d * d + f[v[k]];
  }
}

void require_same_shape(const LabelMap& a, const LabelMap& b) {
  if (a.height != b.height || a.width != b.width ||
      a.data.size() != static_cast<std::size_t>(a.height) * a.width ||
      b.data.size() != a.data.size()) {
    throw DimensionError("label maps differ in shape");
  }
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

std::vector<torch::Tensor> batches(const std::vector<Sample>& samples, int batch_size) {
  std::vector<torch::Tensor> out;
  for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(samples.size(), i + static_cast<std::size_t>(batch_size));
    out.push_back(images_tensor({samples.begin() + static_cast<std::ptrdiff_t>(i),
                                 samples.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return out;
}

LabelMap sample_labels(const Sample& s) {
  if (!s.labeled()) throw DataError("sample '" + s.id + "' has no label");
  return {s.height, s.width, s.label};
}

void paint_label_tile(std::vector<uint8_t>& rgb, int canvas_w, int ox, int oy, const torch::Tensor& lab) {
  auto acc = lab.accessor<int64_t, 2>();
  for (int y = 0; y < lab.size(0); ++y) {
    for (int x = 0; x < lab.size(1); ++x) {
      const auto c = class_colour(static_cast<int>(acc[y][x]));
      const auto idx = 3 * (static_cast<std::size_t>(oy + y) * canvas_w + ox + x);
      rgb[idx] = c[0];
      rgb[idx + 1] = c[1];
      rgb[idx + 2] = c[2];
    }
  }
}

}  // namespace

std::array<uint8_t, 3> class_colour(int k) {
  static const std::array<std::array<uint8_t, 3>, 8> palette{{{0, 0, 0},
                                                              {60, 180, 75},
                                                              {230, 25, 75},
                                                              {0, 130, 200},
                                                              {255, 225, 25},
                                                              {145, 30, 180},
                                                              {70, 240, 240},
                                                              {245, 130, 48}}};
  return palette[static_cast<std::size_t>(k) % palette.size()];
}

torch::Tensor argmax_labels(const torch::Tensor& probs) {
  if (probs.dim() != 4) throw DimensionError("argmax_labels expects [B, C, H, W]");
  auto p = probs.detach().to(torch::kCPU);
  auto best = p.select(1, 0).clone();
  auto idx = torch::zeros_like(best, torch::kLong);
  for (int64_t c = 1; c < p.size(1); ++c) {
    auto pc = p.select(1, c);
    auto better = pc > best;  // strict: ties keep the lower index
    best = torch::where(better, pc, best);
    idx.masked_fill_(better, c);
  }
  return idx;
}

LabelMap to_label_map(const torch::Tensor& labels_hw) {
  if (labels_hw.dim() != 2) throw DimensionError("to_label_map expects [H, W]");
  auto t = labels_hw.to(torch::kCPU).to(torch::kLong).contiguous();
  LabelMap m{static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), {}};
  m.data.resize(static_cast<std::size_t>(t.numel()));
  const auto* p = t.data_ptr<int64_t>();
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<uint8_t>(p[i]);
  return m;
}

double dsc(const LabelMap& pred, const LabelMap& truth, int k) {
  require_same_shape(pred, truth);
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool pa = pred.data[i] == k;
    const bool pb = truth.data[i] == k;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<uint8_t> surface_mask(const LabelMap& m, int k) {
  std::vector<uint8_t> s(m.data.size(), 0);
  auto inside = [&](int y, int x) {
    return y >= 0 && y < m.height && x >= 0 && x < m.width && m.at(y, x) == k;
  };
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!inside(y, x)) continue;
      if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)) {
        s[static_cast<std::size_t>(y) * m.width + x] = 1;
      }
    }
  }
  return s;
}

std::vector<double> distance_transform(const std::vector<uint8_t>& seeds, int height, int width,
                                       std::array<double, 2> spacing) {
  if (seeds.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionError("distance_transform: size mismatch");
  }
  std::vector<double> g(seeds.size());
  std::vector<double> col(height), col_out;
  for (int x = 0; x < width; ++x) {
    for (int y = 0; y < height; ++y) col[y] = seeds[static_cast<std::size_t>(y) * width + x] ? 0.0 : kInf;
    squared_edt_1d(col, spacing[0], col_out);
    for (int y = 0; y < height; ++y) g[static_cast<std::size_t>(y) * width + x] = col_out[y];
  }
  std::vector<double> row(width), row_out;
  for (int y = 0; y < height; ++y) {
    std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(y) * width, width, row.begin());
    squared_edt_1d(row, spacing[1], row_out);
    for (int x = 0; x < width; ++x) g[static_cast<std::size_t>(y) * width + x] = std::sqrt(row_out[x]);
  }
  return g;
}

AssdValue assd(const LabelMap& pred, const LabelMap& truth, int k, std::array<double, 2> spacing) {
  require_same_shape(pred, truth);
  const auto sa = surface_mask(pred, k);
  const auto sb = surface_mask(truth, k);
  const bool ea = std::none_of(sa.begin(), sa.end(), [](uint8_t v) { return v != 0; });
  const bool eb = std::none_of(sb.begin(), sb.end(), [](uint8_t v) { return v != 0; });
  if (ea && eb) return {0.0, false};
  if (ea || eb) {
    return {std::hypot(pred.height * spacing[0], pred.width * spacing[1]), true};
  }
  auto directed = [&](const std::vector<uint8_t>& from, const std::vector<uint8_t>& to) {
    const auto dt = distance_transform(to, pred.height, pred.width, spacing);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < from.size(); ++i) {
      if (from[i]) {
        sum += dt[i];
        ++n;
      }
    }
    return sum / static_cast<double>(n);
  };
  return {0.5 * (directed(sa, sb) + directed(sb, sa)), false};
}

double SubjectMetrics::mean_dsc() const { return mean_std(dsc).mean; }
double SubjectMetrics::mean_assd() const { return mean_std(assd).mean; }

MeanStd MetricReport::class_dsc(int k) const {
  std::vector<double> v;
  for (const auto& s : subjects) v.push_back(s.dsc.at(static_cast<std::size_t>(k - 1)));
  return mean_std(v);
}

MeanStd MetricReport::class_assd(int k) const {
  std::vector<double> v;
  for (const auto& s : subjects) v.push_back(s.assd.at(static_cast<std::size_t>(k - 1)));
  return mean_std(v);
}

MeanStd MetricReport::average_dsc() const {
  std::vector<double> v;
  for (const auto& s : subjects) v.push_back(s.mean_dsc());
  return mean_std(v);
}

MeanStd MetricReport::average_assd() const {
  std::vector<double> v;
  for (const auto& s : subjects) v.push_back(s.mean_assd());
  return mean_std(v);
}

int MetricReport::fallback_count() const {
  int n = 0;
  for (const auto& s : subjects) n += static_cast<int>(std::count(s.assd_fallback.begin(), s.assd_fallback.end(), true));
  return n;
}

void MetricReport::write_csv(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "subject";
  for (int k = 1; k <= num_classes; ++k) os << ",dsc_" << k;
  for (int k = 1; k <= num_classes; ++k) os << ",assd_" << k;
  os << ",dsc_mean,assd_mean,assd_fallback\n";
  os << std::setprecision(17);
  for (const auto& s : subjects) {
    os << s.id;
    for (double v : s.dsc) os << "," << v;
    for (double v : s.assd) os << "," << v;
    os << "," << s.mean_dsc() << "," << s.mean_assd() << ","
       << std::count(s.assd_fallback.begin(), s.assd_fallback.end(), true) << "\n";
  }
}

std::string MetricReport::summary_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "subjects: " << subjects.size() << "\n";
  os << std::left << std::setw(10) << "class" << std::setw(20) << "DSC (%)" << "ASSD (mm)\n";
  for (int k = 1; k <= num_classes; ++k) {
    const auto d = class_dsc(k);
    const auto a = class_assd(k);
    std::ostringstream ds;
    ds << std::fixed << std::setprecision(2) << d.mean << " +- " << d.std;
    os << std::setw(10) << k << std::setw(20) << ds.str() << a.mean << " +- " << a.std << "\n";
  }
  const auto d = average_dsc();
  const auto a = average_assd();
  std::ostringstream ds;
  ds << std::fixed << std::setprecision(2) << d.mean << " +- " << d.std;
  os << std::setw(10) << "average" << std::setw(20) << ds.str() << a.mean << " +- " << a.std << "\n";
  if (const int f = fallback_count(); f > 0) {
    os << "note: " << f << " ASSD value(s) used the image-diagonal fallback (one mask empty)\n";
  }
  return os.str();
}

MetricReport build_report(const std::vector<std::string>& ids, const std::vector<LabelMap>& pred,
                          const std::vector<LabelMap>& truth,
                          const std::vector<std::array<double, 2>>& spacing, int num_classes) {
  if (ids.size() != pred.size() || pred.size() != truth.size() || truth.size() != spacing.size()) {
    throw DimensionError("build_report: argument lengths differ");
  }
  MetricReport r;
  r.num_classes = num_classes;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    SubjectMetrics s;
    s.id = ids[i];
    for (int k = 1; k <= num_classes; ++k) {
      s.dsc.push_back(100.0 * dsc(pred[i], truth[i], k));
      const auto a = assd(pred[i], truth[i], k, spacing[i]);
      s.assd.push_back(a.mm);
      s.assd_fallback.push_back(a.fallback);
    }
    r.subjects.push_back(std::move(s));
  }
  return r;
}

Predictor model_predictor(Model model) {
  return [model](const torch::Tensor& x) mutable {
    torch::NoGradGuard ng;
    return model->forward(x, SampleMode::kExpectation).seg.probs;
  };
}

Predictor unet_predictor(AttentionUNet net) {
  return [net](const torch::Tensor& x) mutable {
    torch::NoGradGuard ng;
    return net->forward(x);
  };
}

MetricReport evaluate(const Predictor& predict, const std::vector<Sample>& samples, int num_classes,
                      int batch_size) {
  std::vector<std::string> ids;
  std::vector<LabelMap> pred, truth;
  std::vector<std::array<double, 2>> spacing;
  for (const auto& s : samples) {
    truth.push_back(sample_labels(s));
    ids.push_back(s.id);
    spacing.push_back(s.spacing);
  }
  for (const auto& x : batches(samples, batch_size)) {
    auto lab = argmax_labels(predict(x));
    for (int64_t b = 0; b < lab.size(0); ++b) pred.push_back(to_label_map(lab[b]));
  }
  return build_report(ids, pred, truth, spacing, num_classes);
}

double mean_dice(const Predictor& predict, const std::vector<Sample>& samples, int num_classes,
                 int batch_size) {
  if (samples.empty()) throw DataError("mean_dice: empty split");
  double total = 0.0;
  std::size_t i = 0;
  for (const auto& x : batches(samples, batch_size)) {
    auto lab = argmax_labels(predict(x));
    for (int64_t b = 0; b < lab.size(0); ++b, ++i) {
      const auto truth = sample_labels(samples[i]);
      const auto p = to_label_map(lab[b]);
      double d = 0.0;
      for (int k = 1; k <= num_classes; ++k) d += dsc(p, truth, k);
      total += d / num_classes;
    }
  }
  return total / static_cast<double>(samples.size());
}

Traversal traverse_weights(Model& model, const CompositionWeights& a, const CompositionWeights& b,
                           int n_steps) {
  if (n_steps < 2) throw ConfigError("traversal needs n_steps >= 2");
  if (a.size() != static_cast<std::size_t>(model->config().num_bases) || b.size() != a.size()) {
    throw DimensionError("traversal weights do not match the number of bases");
  }
  Traversal t;
  t.weights = geodesic_path(a, b, n_steps);
  auto w = torch::empty({n_steps, static_cast<int64_t>(a.size())});
  for (int i = 0; i < n_steps; ++i) {
    t.alphas.push_back(static_cast<double>(i) / (n_steps - 1));
    for (std::size_t m = 0; m < a.size(); ++m) w[i][static_cast<int64_t>(m)] = t.weights[i][m];
  }
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> z;
  for (const auto& p : model->posteriors(w)) z.push_back(p.mean);
  t.probs = model->decode_template_segmentation(z);
  return t;
}

namespace {
CompositionWeights row_weights(const torch::Tensor& w) {
  auto d = w.to(torch::kFloat64).contiguous();
  std::vector<double> v(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& x : v) x /= s;  // float32 softmax round-off
  return CompositionWeights(std::move(v));
}
}  // namespace

Traversal traverse_inter_image(Model& model, const torch::Tensor& x, const torch::Tensor& x2, int n_steps) {
  torch::NoGradGuard ng;
  auto w = model->infer_weights(model->encode_content(torch::cat({x, x2}, 0)).front());
  return traverse_weights(model, row_weights(w[0]), row_weights(w[1]), n_steps);
}

Traversal traverse_inter_basis(Model& model, int i, int j, int n_steps) {
  const auto m = model->config().num_bases;
  if (i < 1 || i > m || j < 1 || j > m) {
    throw ConfigError("basis index outside 1.." + std::to_string(m));
  }
  return traverse_weights(model, CompositionWeights::one_hot(static_cast<std::size_t>(m), static_cast<std::size_t>(i - 1)),
                          CompositionWeights::one_hot(static_cast<std::size_t>(m), static_cast<std::size_t>(j - 1)),
                          n_steps);
}

void write_traversal(const Traversal& t, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  const auto lab = argmax_labels(t.probs);
  const int n = static_cast<int>(lab.size(0));
  const int h = static_cast<int>(lab.size(1));
  const int w = static_cast<int>(lab.size(2));
  constexpr int kGap = 2;
  const int cw = n * w + (n - 1) * kGap;
  std::vector<uint8_t> rgb(static_cast<std::size_t>(cw) * h * 3, 255);
  for (int i = 0; i < n; ++i) paint_label_tile(rgb, cw, i * (w + kGap), 0, lab[i]);
  png::write_rgb8(dir / (stem + ".png"), cw, h, rgb);

  std::ofstream os(dir / (stem + ".csv"));
  if (!os) throw IoError("cannot write traversal CSV in '" + dir.string() + "'");
  os << "alpha";
  for (std::size_t m = 0; m < t.weights.front().size(); ++m) os << ",w_" << m + 1;
  os << ",fr_from_start\n" << std::setprecision(17);
  for (std::size_t i = 0; i < t.weights.size(); ++i) {
    os << t.alphas[i];
    for (double v : t.weights[i].values()) os << "," << v;
    os << "," << fisher_rao_distance(t.weights.front(), t.weights[i]) << "\n";
  }
}

torch::Tensor infer_weights(Model& model, const std::vector<Sample>& samples, int batch_size) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  for (const auto& x : batches(samples, batch_size)) {
    out.push_back(model->infer_weights(model->encode_content(x).front()));
  }
  if (out.empty()) return torch::empty({0, model->config().num_bases});
  return torch::cat(out, 0);
}

Pca2 pca2(const torch::Tensor& data) {
  if (data.dim() != 2 || data.size(0) < 1) throw DimensionError("pca2 expects a non-empty [N, D] matrix");
  auto x = data.to(torch::kFloat64);
  const auto n = x.size(0);
  const auto d = x.size(1);
  auto mean = x.mean(0);
  auto xc = x - mean;
  auto cov = xc.t().mm(xc) / static_cast<double>(n);
  auto [evals, evecs] = torch::linalg_eigh(cov);  // ascending
  const double total = evals.clamp_min(0).sum().item<double>();
  Pca2 r;
  r.mean.assign(mean.data_ptr<double>(), mean.data_ptr<double>() + d);
  for (int c = 0; c < 2; ++c) {
    const int64_t col = d - 1 - c;
    if (col < 0) {
      r.components[c].assign(static_cast<std::size_t>(d), 0.0);
      r.explained[c] = 0.0;
      continue;
    }
    auto v = evecs.select(1, col).contiguous();
    // Sign convention: largest-magnitude entry positive.
    if (v[v.abs().argmax()].item<double>() < 0) v = -v;
    r.components[c].assign(v.data_ptr<double>(), v.data_ptr<double>() + d);
    r.explained[c] = total > 0 ? std::max(0.0, evals[col].item<double>()) / total : 0.0;
  }
  auto comps = torch::tensor(r.components[0], torch::kFloat64).unsqueeze(1);
  comps = torch::cat({comps, torch::tensor(r.components[1], torch::kFloat64).unsqueeze(1)}, 1);
  auto proj = xc.mm(comps).contiguous();
  for (int64_t i = 0; i < n; ++i) r.projections.push_back({proj[i][0].item<double>(), proj[i][1].item<double>()});
  return r;
}

LatentExport export_latents(Model& model, const std::vector<std::vector<Sample>>& datasets,
                            const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<const Sample*> all;
  std::vector<torch::Tensor> ws;
  for (const auto& ds : datasets) {
    if (ds.empty()) continue;
    ws.push_back(infer_weights(model, ds));
    for (const auto& s : ds) all.push_back(&s);
  }
  if (all.empty()) throw DataError("export_latents: no images");
  auto w = torch::cat(ws, 0).to(torch::kFloat64);

  std::ofstream csv(out_dir / "latents.csv");
  if (!csv) throw IoError("cannot write '" + (out_dir / "latents.csv").string() + "'");
  csv << "id,domain";
  for (int64_t m = 0; m < w.size(1); ++m) csv << ",w_" << m + 1;
  csv << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < all.size(); ++i) {
    csv << all[i]->id << "," << to_string(all[i]->domain);
    for (int64_t m = 0; m < w.size(1); ++m) csv << "," << w[static_cast<int64_t>(i)][m].item<double>();
    csv << "\n";
  }

  LatentExport ex;
  ex.rows = all.size();
  ex.pca = pca2(w);

  constexpr int kSize = 480;
  constexpr int kMargin = 30;
  std::vector<uint8_t> rgb(static_cast<std::size_t>(kSize) * kSize * 3, 255);
  double lim = 1e-12;
  for (const auto& p : ex.pca.projections) lim = std::max({lim, std::abs(p[0]), std::abs(p[1])});
  auto to_px = [&](double v) {
    return static_cast<int>(std::lround(kMargin + (v / lim + 1.0) * 0.5 * (kSize - 2 * kMargin)));
  };
  auto put = [&](int x, int y, std::array<uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= kSize || y >= kSize) return;
    const auto idx = 3 * (static_cast<std::size_t>(y) * kSize + x);
    rgb[idx] = c[0];
    rgb[idx + 1] = c[1];
    rgb[idx + 2] = c[2];
  };
  for (int i = kMargin; i < kSize - kMargin; ++i) {
    put(i, to_px(0.0), {190, 190, 190});
    put(to_px(0.0), i, {190, 190, 190});
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto colour = all[i]->domain == Domain::kSource ? std::array<uint8_t, 3>{31, 119, 180}
                                                          : std::array<uint8_t, 3>{255, 127, 14};
    const int cx = to_px(ex.pca.projections[i][0]);
    const int cy = kSize - 1 - to_px(ex.pca.projections[i][1]);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) put(cx + dx, cy + dy, colour);
  }
  png::write_rgb8(out_dir / "latents_pca.png", kSize, kSize, rgb);

  std::ofstream cap(out_dir / "latents_pca.txt");
  cap << std::fixed << std::setprecision(6) << "PCA of composition weights (" << ex.rows
      << " images; blue = source, orange = target). PC1 explains " << ex.pca.explained[0]
      << " and PC2 explains " << ex.pca.explained[1] << " of the variance (together "
      << ex.pca.explained[0] + ex.pca.explained[1] << ").\n";
  return ex;
}

ActivationReport basis_activation_report(const torch::Tensor& weights) {
  if (weights.dim() != 2 || weights.size(0) == 0) throw DimensionError("activation report expects [N, M] weights");
  auto w = weights.to(torch::kFloat64);
  auto mean = w.mean(0).contiguous();
  auto mx = std::get<0>(w.max(0)).contiguous();
  ActivationReport r;
  r.mean_usage.assign(mean.data_ptr<double>(), mean.data_ptr<double>() + w.size(1));
  r.max_weight.assign(mx.data_ptr<double>(), mx.data_ptr<double>() + w.size(1));
  r.activated = static_cast<int>(
      std::count_if(r.max_weight.begin(), r.max_weight.end(), [](double v) { return v > kActivationThreshold; }));
  return r;
}

ActivationReport basis_activation_report(Model& model, const std::vector<Sample>& samples) {
  return basis_activation_report(infer_weights(model, samples));
}

}  // namespace udaseg
