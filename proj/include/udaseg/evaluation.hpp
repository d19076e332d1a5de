#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "udaseg/networks.hpp"
#include "udaseg/simplex.hpp"
#include "udaseg/synthetic.hpp"

namespace udaseg {

/// Integer label map, row-major.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel argmax over the class axis of [B, C, H, W] probabilities; ties go
/// to the lowest class index. Returns [B, H, W] int64.
torch::Tensor argmax_labels(const torch::Tensor& probs);

LabelMap to_label_map(const torch::Tensor& labels_hw);

/// 2|A and B| / (|A| + |B|) for class k; 1 when both masks are empty.
double dsc(const LabelMap& pred, const LabelMap& truth, int k);

struct AssdValue {
  double mm = 0.0;
  bool fallback = false;  // exactly one mask empty: image diagonal reported
};

/// Mean of the two directed average surface distances for class k. Surface
/// pixels are foreground pixels with a 4-neighbour outside the mask.
AssdValue assd(const LabelMap& pred, const LabelMap& truth, int k, std::array<double, 2> spacing);

/// Exact Euclidean distance from every pixel to the nearest seed pixel, with
/// per-axis spacing (row, column). Pixels get +inf when there is no seed.
std::vector<double> distance_transform(const std::vector<uint8_t>& seeds, int height, int width,
                                       std::array<double, 2> spacing);

/// Foreground pixels of class k with a 4-neighbour outside the mask (the
/// image border counts as outside).
std::vector<uint8_t> surface_mask(const LabelMap& m, int k);

struct SubjectMetrics {
  std::string id;
  std::vector<double> dsc;   // per foreground class, percent
  std::vector<double> assd;  // per foreground class, mm
  std::vector<bool> assd_fallback;

  double mean_dsc() const;
  double mean_assd() const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct MetricReport {
  int num_classes = 0;  // foreground classes
  std::vector<SubjectMetrics> subjects;

  MeanStd class_dsc(int k) const;   // k in 1..K
  MeanStd class_assd(int k) const;
  MeanStd average_dsc() const;      // over subjects of their class-averaged DSC
  MeanStd average_assd() const;
  int fallback_count() const;

  /// Header: subject,dsc_1..dsc_K,assd_1..assd_K,dsc_mean,assd_mean,assd_fallback
  void write_csv(const std::filesystem::path& path) const;
  std::string summary_table() const;
};

MetricReport build_report(const std::vector<std::string>& ids, const std::vector<LabelMap>& pred,
                          const std::vector<LabelMap>& truth,
                          const std::vector<std::array<double, 2>>& spacing, int num_classes);

/// Maps a batch of images [B, 1, H, W] to class probabilities [B, K+1, H, W].
using Predictor = std::function<torch::Tensor(const torch::Tensor&)>;

Predictor model_predictor(Model model);
Predictor unet_predictor(AttentionUNet net);

/// Deterministic inference over a labeled split; throws DataError on
/// unlabeled samples.
MetricReport evaluate(const Predictor& predict, const std::vector<Sample>& samples, int num_classes,
                      int batch_size = 16);

/// Mean foreground DSC in [0, 1] of a predictor over a labeled split.
double mean_dice(const Predictor& predict, const std::vector<Sample>& samples, int num_classes,
                 int batch_size = 16);

struct Traversal {
  std::vector<double> alphas;
  std::vector<CompositionWeights> weights;
  torch::Tensor probs;  // [n, K+1, H, W] template-space segmentation
};

/// Decodes the posterior means along the geodesic between two weight vectors.
Traversal traverse_weights(Model& model, const CompositionWeights& a, const CompositionWeights& b,
                           int n_steps);
/// Endpoints are the weights the model infers for images x and x2 ([1, 1, H, W]).
Traversal traverse_inter_image(Model& model, const torch::Tensor& x, const torch::Tensor& x2,
                               int n_steps);
/// Geodesic between one-hot e_i and e_j; i and j are 1-based.
Traversal traverse_inter_basis(Model& model, int i, int j, int n_steps);

/// Writes <stem>.png (one row of colour-coded label maps) and <stem>.csv
/// (alpha, w_1..w_M, fr_from_start).
void write_traversal(const Traversal& t, const std::filesystem::path& dir, const std::string& stem);

/// Composition weights [N, M] for a list of samples, expectation mode.
torch::Tensor infer_weights(Model& model, const std::vector<Sample>& samples, int batch_size = 32);

struct Pca2 {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> explained;  // fraction of total variance per component
  std::vector<std::array<double, 2>> projections;
};

/// Two leading principal components of the rows of `data` ([N, D]).
Pca2 pca2(const torch::Tensor& data);

struct LatentExport {
  std::size_t rows = 0;
  Pca2 pca;
};

/// Writes latents.csv (id, domain, w_1..w_M), latents_pca.png and
/// latents_pca.txt (caption with the explained variance).
LatentExport export_latents(Model& model, const std::vector<std::vector<Sample>>& datasets,
                            const std::filesystem::path& out_dir);

struct ActivationReport {
  int activated = 0;
  std::vector<double> mean_usage;
  std::vector<double> max_weight;
};

inline constexpr double kActivationThreshold = 1e-3;

/// Bases whose weight exceeds 1e-3 for at least one image, from [N, M] weights.
ActivationReport basis_activation_report(const torch::Tensor& weights);
ActivationReport basis_activation_report(Model& model, const std::vector<Sample>& samples);

/// RGB colour of class k for label-map visualisations.
std::array<uint8_t, 3> class_colour(int k);

}  // namespace udaseg
