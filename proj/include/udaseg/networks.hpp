#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "udaseg/deformation.hpp"
#include "udaseg/latent.hpp"

namespace udaseg {

inline constexpr int64_t kStyleDim = 128;

struct ModelConfig {
  int64_t image_height = 64;
  int64_t image_width = 64;
  int64_t num_levels = 5;                  // L
  std::vector<int64_t> velocity_levels{1, 3, 5};  // Lambda, 1-based
  int64_t num_bases = 6;                   // M
  int64_t num_classes = 3;                 // K foreground classes
  int64_t latent_channels = 16;            // C_l at every scale
  int64_t base_width = 16;                 // encoder width at full resolution
  int64_t max_width = 64;
  int64_t registration_width = 16;
  int64_t decoder_width = 16;
  int squaring_steps = kDefaultSquaringSteps;
  double basis_init_variance = 1.0;

  /// Spatial shape of scale `level` (0-based, 0 = coarsest).
  ScaleShape level_shape(int64_t level) const;
  /// Throws ConfigError for inconsistent settings.
  void validate() const;
};

/// Conv3x3 - InstanceNorm - LeakyReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv{nullptr};
  torch::nn::InstanceNorm2d norm{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Additive attention gate: skip features scaled by a gating-conditioned map.
class AttentionGateImpl : public torch::nn::Module {
 public:
  AttentionGateImpl(int64_t gate_channels, int64_t skip_channels, int64_t inner_channels);
  torch::Tensor forward(const torch::Tensor& gate, const torch::Tensor& skip);

 private:
  torch::nn::Conv2d w_gate{nullptr}, w_skip{nullptr}, psi{nullptr};
};
TORCH_MODULE(AttentionGate);

/// Multi-scale content features c^1..c^L, coarse to fine.
using ContentPyramid = std::vector<torch::Tensor>;

/// Attention U-Net. Taps one feature map per resolution: the bottleneck for
/// the coarsest scale and each attention-gated decoder stage above it.
class ContentEncoderImpl : public torch::nn::Module {
 public:
  explicit ContentEncoderImpl(const ModelConfig& cfg);
  ContentPyramid forward(const torch::Tensor& x);
  /// Finest decoder features before the tap projection.
  torch::Tensor finest_features() const { return finest_; }
  int64_t finest_channels() const { return widths_.front(); }

 private:
  int64_t levels_;
  std::vector<int64_t> widths_;  // per resolution, fine to coarse
  torch::nn::ModuleList enc1, enc2, dec1, dec2, gates, taps;
  torch::Tensor finest_;
};
TORCH_MODULE(ContentEncoder);

/// GAP of the coarsest content map, MLP, softmax onto the simplex.
class WeightHeadImpl : public torch::nn::Module {
 public:
  WeightHeadImpl(int64_t in_channels, int64_t num_bases);
  torch::Tensor forward(const torch::Tensor& coarsest);
  void zero_();

 private:
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(WeightHead);

/// Conv-LeakyReLU stack, global average pool, linear to a 128-d style code.
class StyleEncoderImpl : public torch::nn::Module {
 public:
  StyleEncoderImpl();
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential convs{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(StyleEncoder);

/// Four Conv-Norm-LeakyReLU blocks and a zero-initialized 1x1 head giving a
/// Gaussian over a 2-channel velocity.
class RegistrationNetImpl : public torch::nn::Module {
 public:
  RegistrationNetImpl(int64_t in_channels, int64_t width);
  /// Returns {mean, variance}, each [B, 2, H, W].
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(RegistrationNet);

/// Adaptive instance normalization driven by a style code.
class AdaINImpl : public torch::nn::Module {
 public:
  AdaINImpl(int64_t channels, int64_t style_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& style);

 private:
  torch::nn::Linear affine{nullptr};
  int64_t channels_;
};
TORCH_MODULE(AdaIN);

/// U-Net style decoder consuming the multi-scale template z^1..z^L.
/// Segmentation variant ends in K+1 logits; reconstruction variant modulates
/// every stage with AdaIN and emits Laplacian (location, raw scale).
class TemplateDecoderImpl : public torch::nn::Module {
 public:
  TemplateDecoderImpl(const ModelConfig& cfg, int64_t out_channels, bool styled);
  torch::Tensor forward(const std::vector<torch::Tensor>& z,
                        const std::optional<torch::Tensor>& style = std::nullopt);
  torch::nn::Conv2d& out_conv() { return out; }

 private:
  bool styled_;
  torch::nn::ModuleList convs_a, convs_b, norms_a, norms_b;
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(TemplateDecoder);

struct SegOutput {
  torch::Tensor template_probs;  // p(y o phi | z), [B, K+1, H, W]
  torch::Tensor probs;           // p(y | z, v)
};

struct ReconOutput {
  torch::Tensor template_loc, template_scale;  // Laplacian in template space
  torch::Tensor loc, scale;                    // warped by phi^{-1}
};

/// Everything one forward pass produces; consumed by the losses.
struct ForwardProducts {
  ContentPyramid content;
  torch::Tensor weights;  // [B, M]
  std::vector<DiagonalGaussian> posteriors;
  AnatomyTemplate z;
  torch::Tensor style;  // [B, 128]
  DeformationStack deformation;
  SegOutput seg;
  ReconOutput recon;
};

/// Parameter-group names used for freezing and checkpoints.
inline const std::vector<std::string> kParameterGroups{
    "content_encoder", "style_encoder", "weight_head", "basis_bank",
    "registration",    "seg_decoder",   "recon_decoder"};

class ModelImpl : public torch::nn::Module {
 public:
  explicit ModelImpl(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  ContentPyramid encode_content(const torch::Tensor& x);
  torch::Tensor infer_weights(const torch::Tensor& coarsest);
  torch::Tensor encode_style(const torch::Tensor& x);
  std::vector<DiagonalGaussian> posteriors(const torch::Tensor& weights);

  /// Coarse-to-fine velocity inference and deformation composition.
  DeformationStack infer_velocity_stack(const ContentPyramid& c, const AnatomyTemplate& z,
                                        SampleMode mode,
                                        std::optional<at::Generator> gen = std::nullopt);
  SegOutput decode_segmentation(const AnatomyTemplate& z, const Deformation& inverse);
  ReconOutput decode_reconstruction(const AnatomyTemplate& z, const torch::Tensor& style,
                                    const Deformation& inverse);
  /// Template-space segmentation probabilities (no deformation).
  torch::Tensor decode_template_segmentation(const std::vector<torch::Tensor>& z);

  ForwardProducts forward(const torch::Tensor& x, SampleMode mode,
                          std::optional<at::Generator> gen = std::nullopt);

  /// Named parameters of one group (see kParameterGroups).
  std::vector<torch::Tensor> group_parameters(const std::string& group) const;

  ContentEncoder content_encoder{nullptr};
  StyleEncoder style_encoder{nullptr};
  WeightHead weight_head{nullptr};
  BasisBank basis_bank{nullptr};
  torch::nn::ModuleList registration{nullptr};
  TemplateDecoder seg_decoder{nullptr};
  TemplateDecoder recon_decoder{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(Model);

/// Source-only attention U-Net segmenter (the no-adaptation reference).
class AttentionUNetImpl : public torch::nn::Module {
 public:
  explicit AttentionUNetImpl(const ModelConfig& cfg);
  /// Softmax probabilities [B, K+1, H, W].
  torch::Tensor forward(const torch::Tensor& x);

  ContentEncoder encoder{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(AttentionUNet);

}  // namespace udaseg
