#include "udaseg/networks.hpp"

#include <algorithm>
#include <sstream>

#include "udaseg/errors.hpp"

namespace F = torch::nn::functional;
namespace nn = torch::nn;

namespace udaseg {
namespace {

constexpr double kLeak = 0.2;
constexpr double kLaplaceScaleFloor = 1e-6;

nn::Conv2dOptions conv3(int64_t in, int64_t out) {
  return nn::Conv2dOptions(in, out, 3).padding(1);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

torch::Tensor leaky(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeak));
}

}  // namespace

ScaleShape ModelConfig::level_shape(int64_t level) const {
  const int64_t factor = int64_t{1} << (num_levels - 1 - level);
  return {latent_channels, image_height / factor, image_width / factor};
}

void ModelConfig::validate() const {
  std::ostringstream err;
  if (num_levels < 1) err << "num_levels must be >= 1; ";
  if (num_bases < 2) err << "num_bases must be >= 2; ";
  if (num_classes < 1) err << "num_classes must be >= 1; ";
  if (latent_channels < 1 || base_width < 1 || registration_width < 1 || decoder_width < 1) {
    err << "channel widths must be >= 1; ";
  }
  if (num_levels >= 1 && num_levels < 30) {
    const int64_t factor = int64_t{1} << (num_levels - 1);
    if (image_height % factor != 0 || image_width % factor != 0) {
      err << "image size must be divisible by 2^(L-1); ";
    }
  }
  if (velocity_levels.empty()) err << "velocity levels must be non-empty; ";
  for (std::size_t i = 0; i < velocity_levels.size(); ++i) {
    if (velocity_levels[i] < 1 || velocity_levels[i] > num_levels) {
      err << "velocity level " << velocity_levels[i] << " outside 1..L; ";
    }
    if (i > 0 && velocity_levels[i] <= velocity_levels[i - 1]) {
      err << "velocity levels must be strictly ascending; ";
    }
  }
  if (squaring_steps < 1) err << "squaring_steps must be >= 1; ";
  const auto msg = err.str();
  if (!msg.empty()) throw ConfigError("model config: " + msg);
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out)
    : conv(register_module("conv", nn::Conv2d(conv3(in, out)))),
      norm(register_module("norm", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out).affine(true)))) {}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  return leaky(norm->forward(conv->forward(x)));
}

AttentionGateImpl::AttentionGateImpl(int64_t gate_channels, int64_t skip_channels,
                                     int64_t inner_channels)
    : w_gate(register_module("w_gate", nn::Conv2d(nn::Conv2dOptions(gate_channels, inner_channels, 1)))),
      w_skip(register_module("w_skip", nn::Conv2d(nn::Conv2dOptions(skip_channels, inner_channels, 1)))),
      psi(register_module("psi", nn::Conv2d(nn::Conv2dOptions(inner_channels, 1, 1)))) {}

torch::Tensor AttentionGateImpl::forward(const torch::Tensor& gate, const torch::Tensor& skip) {
  auto a = torch::relu(w_gate->forward(gate) + w_skip->forward(skip));
  return skip * torch::sigmoid(psi->forward(a));
}

ContentEncoderImpl::ContentEncoderImpl(const ModelConfig& cfg) : levels_(cfg.num_levels) {
  for (int64_t k = 0; k < levels_; ++k) {
    widths_.push_back(std::min(cfg.base_width << k, std::max(cfg.max_width, cfg.base_width)));
  }
  enc1 = register_module("enc1", nn::ModuleList());
  enc2 = register_module("enc2", nn::ModuleList());
  dec1 = register_module("dec1", nn::ModuleList());
  dec2 = register_module("dec2", nn::ModuleList());
  gates = register_module("gates", nn::ModuleList());
  taps = register_module("taps", nn::ModuleList());
  for (int64_t k = 0; k < levels_; ++k) {
    const int64_t in = k == 0 ? 1 : widths_[k - 1];
    enc1->push_back(ConvBlock(in, widths_[k]));
    enc2->push_back(ConvBlock(widths_[k], widths_[k]));
  }
  for (int64_t k = 0; k + 1 < levels_; ++k) {
    gates->push_back(AttentionGate(widths_[k + 1], widths_[k], std::max<int64_t>(widths_[k] / 2, 1)));
    dec1->push_back(ConvBlock(widths_[k + 1] + widths_[k], widths_[k]));
    dec2->push_back(ConvBlock(widths_[k], widths_[k]));
  }
  // taps[l] for scale l (0 = coarsest), resolution index k = L-1-l.
  for (int64_t l = 0; l < levels_; ++l) {
    taps->push_back(nn::Conv2d(nn::Conv2dOptions(widths_[levels_ - 1 - l], cfg.latent_channels, 1)));
  }
}

ContentPyramid ContentEncoderImpl::forward(const torch::Tensor& x) {
  const int64_t factor = int64_t{1} << (levels_ - 1);
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw DimensionError("content encoder expects [B, 1, H, W] with H, W divisible by 2^(L-1)");
  }
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (int64_t k = 0; k < levels_; ++k) {
    if (k > 0) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    h = enc1[k]->as<ConvBlockImpl>()->forward(h);
    h = enc2[k]->as<ConvBlockImpl>()->forward(h);
    skips.push_back(h);
  }
  std::vector<torch::Tensor> decoded(static_cast<std::size_t>(levels_));
  decoded[levels_ - 1] = h;
  for (int64_t k = levels_ - 2; k >= 0; --k) {
    auto g = upsample2(decoded[k + 1]);
    auto gated = gates[k]->as<AttentionGateImpl>()->forward(g, skips[k]);
    auto d = dec1[k]->as<ConvBlockImpl>()->forward(torch::cat({g, gated}, 1));
    decoded[k] = dec2[k]->as<ConvBlockImpl>()->forward(d);
  }
  finest_ = decoded[0];
  ContentPyramid c;
  for (int64_t l = 0; l < levels_; ++l) {
    c.push_back(taps[l]->as<nn::Conv2dImpl>()->forward(decoded[levels_ - 1 - l]));
  }
  return c;
}

WeightHeadImpl::WeightHeadImpl(int64_t in_channels, int64_t num_bases)
    : fc1(register_module("fc1", nn::Linear(in_channels, 64))),
      fc2(register_module("fc2", nn::Linear(64, num_bases))) {}

torch::Tensor WeightHeadImpl::forward(const torch::Tensor& coarsest) {
  auto pooled = coarsest.mean({2, 3});
  return torch::softmax(fc2->forward(leaky(fc1->forward(pooled))), 1);
}

void WeightHeadImpl::zero_() {
  torch::NoGradGuard guard;
  for (auto& p : parameters()) p.zero_();
}

StyleEncoderImpl::StyleEncoderImpl() {
  convs = register_module(
      "convs", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(1, 16, 4).stride(2).padding(1)),
                              nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeak)),
                              nn::Conv2d(nn::Conv2dOptions(16, 32, 4).stride(2).padding(1)),
                              nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeak)),
                              nn::Conv2d(nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)),
                              nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeak))));
  fc = register_module("fc", nn::Linear(64, kStyleDim));
}

torch::Tensor StyleEncoderImpl::forward(const torch::Tensor& x) {
  return fc->forward(convs->forward(x).mean({2, 3}));
}

namespace {
constexpr double kInitialVelocityVariance = 0.025;
}  // namespace

RegistrationNetImpl::RegistrationNetImpl(int64_t in_channels, int64_t width) {
  body = register_module("body", nn::Sequential(ConvBlock(in_channels, width), ConvBlock(width, width),
                                                ConvBlock(width, width), ConvBlock(width, width)));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(width, 4, 1)));
  torch::NoGradGuard guard;
  head->weight.zero_();
  head->bias.zero_();
  // Start the variance near the optimum of the default smoothness prior
  // (about 1 / (4 * 10)) instead of softplus(0).
  head->bias.narrow(0, 2, 2).fill_(std::log(std::expm1(kInitialVelocityVariance)));
}

std::pair<torch::Tensor, torch::Tensor> RegistrationNetImpl::forward(const torch::Tensor& x) {
  auto out = head->forward(body->forward(x));
  auto parts = out.split(2, 1);
  return {parts[0], positive_variance(parts[1])};
}

AdaINImpl::AdaINImpl(int64_t channels, int64_t style_dim)
    : affine(register_module("affine", nn::Linear(style_dim, 2 * channels))), channels_(channels) {
  // Start as plain instance normalization (gamma = 1, beta = 0).
  torch::NoGradGuard guard;
  affine->weight.mul_(0.1);
  affine->bias.zero_();
  affine->bias.narrow(0, 0, channels).fill_(1.0);
}

torch::Tensor AdaINImpl::forward(const torch::Tensor& x, const torch::Tensor& style) {
  auto normed = F::instance_norm(x, F::InstanceNormFuncOptions().eps(1e-5));
  auto params = affine->forward(style).unsqueeze(-1).unsqueeze(-1);
  auto gamma = params.narrow(1, 0, channels_);
  auto beta = params.narrow(1, channels_, channels_);
  return normed * gamma + beta;
}

TemplateDecoderImpl::TemplateDecoderImpl(const ModelConfig& cfg, int64_t out_channels, bool styled)
    : styled_(styled) {
  convs_a = register_module("convs_a", nn::ModuleList());
  convs_b = register_module("convs_b", nn::ModuleList());
  norms_a = register_module("norms_a", nn::ModuleList());
  norms_b = register_module("norms_b", nn::ModuleList());
  const int64_t levels = cfg.num_levels;
  int64_t prev = 0;
  for (int64_t l = 0; l < levels; ++l) {
    const int64_t width =
        std::min(cfg.decoder_width << (levels - 1 - l), std::max(cfg.max_width, cfg.decoder_width));
    convs_a->push_back(nn::Conv2d(conv3(prev + cfg.latent_channels, width)));
    convs_b->push_back(nn::Conv2d(conv3(width, width)));
    if (styled_) {
      norms_a->push_back(AdaIN(width, kStyleDim));
      norms_b->push_back(AdaIN(width, kStyleDim));
    } else {
      norms_a->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(width).affine(true)));
      norms_b->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(width).affine(true)));
    }
    prev = width;
  }
  out = register_module("out", nn::Conv2d(nn::Conv2dOptions(prev, out_channels, 1)));
}

torch::Tensor TemplateDecoderImpl::forward(const std::vector<torch::Tensor>& z,
                                           const std::optional<torch::Tensor>& style) {
  if (styled_ && !style) throw DimensionError("styled decoder requires a style code");
  auto norm = [&](nn::ModuleList& list, std::size_t l, const torch::Tensor& h) {
    if (styled_) return list[l]->as<AdaINImpl>()->forward(h, *style);
    return list[l]->as<nn::InstanceNorm2dImpl>()->forward(h);
  };
  torch::Tensor h;
  for (std::size_t l = 0; l < z.size(); ++l) {
    auto in = l == 0 ? z[0] : torch::cat({upsample2(h), z[l]}, 1);
    h = leaky(norm(norms_a, l, convs_a[l]->as<nn::Conv2dImpl>()->forward(in)));
    h = leaky(norm(norms_b, l, convs_b[l]->as<nn::Conv2dImpl>()->forward(h)));
  }
  return out->forward(h);
}

ModelImpl::ModelImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  content_encoder = register_module("content_encoder", ContentEncoder(cfg_));
  style_encoder = register_module("style_encoder", StyleEncoder());
  weight_head = register_module("weight_head", WeightHead(cfg_.latent_channels, cfg_.num_bases));
  std::vector<ScaleShape> shapes;
  for (int64_t l = 0; l < cfg_.num_levels; ++l) shapes.push_back(cfg_.level_shape(l));
  basis_bank = register_module("basis_bank", BasisBank(cfg_.num_bases, shapes, cfg_.basis_init_variance));
  registration = register_module("registration", nn::ModuleList());
  for (std::size_t j = 0; j < cfg_.velocity_levels.size(); ++j) {
    registration->push_back(RegistrationNet(2 * cfg_.latent_channels, cfg_.registration_width));
  }
  seg_decoder = register_module("seg_decoder", TemplateDecoder(cfg_, cfg_.num_classes + 1, false));
  recon_decoder = register_module("recon_decoder", TemplateDecoder(cfg_, 2, true));
  torch::NoGradGuard guard;
  // Laplacian scale head starts at softplus(0).
  recon_decoder->out_conv()->weight[1].zero_();
  recon_decoder->out_conv()->bias[1].zero_();
}

ContentPyramid ModelImpl::encode_content(const torch::Tensor& x) {
  return content_encoder->forward(x);
}

torch::Tensor ModelImpl::infer_weights(const torch::Tensor& coarsest) {
  return weight_head->forward(coarsest);
}

torch::Tensor ModelImpl::encode_style(const torch::Tensor& x) { return style_encoder->forward(x); }

std::vector<DiagonalGaussian> ModelImpl::posteriors(const torch::Tensor& weights) {
  std::vector<DiagonalGaussian> out;
  for (int64_t l = 0; l < cfg_.num_levels; ++l) out.push_back(mix_posterior(*basis_bank, weights, l));
  return out;
}

DeformationStack ModelImpl::infer_velocity_stack(const ContentPyramid& c, const AnatomyTemplate& z,
                                                 SampleMode mode, std::optional<at::Generator> gen) {
  DeformationStack stack;
  const auto& levels = cfg_.velocity_levels;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    if (j > 0 && levels[j] <= levels[j - 1]) throw ConfigError("velocity levels must ascend");
    const auto l = static_cast<std::size_t>(levels[j] - 1);
    auto feat = c.at(l);
    if (j > 0) {
      auto prior = partial_forward(stack.samples, j, feat.size(2), feat.size(3), cfg_.squaring_steps);
      feat = warp(feat, prior.displacement);
    }
    auto [mean, var] =
        registration[j]->as<RegistrationNetImpl>()->forward(torch::cat({feat, z.z.at(l)}, 1));
    torch::Tensor sample = mean;
    if (mode == SampleMode::kSampled) {
      auto eps = gen ? at::randn(mean.sizes(), *gen, mean.options()) : torch::randn_like(mean);
      sample = mean + torch::sqrt(var) * eps;
    }
    stack.velocities.push_back({mean, var, static_cast<int64_t>(l)});
    stack.samples.push_back(sample);
  }
  compose_stack(stack, cfg_.image_height, cfg_.image_width, cfg_.squaring_steps);
  return stack;
}

torch::Tensor ModelImpl::decode_template_segmentation(const std::vector<torch::Tensor>& z) {
  return torch::softmax(seg_decoder->forward(z), 1);
}

SegOutput ModelImpl::decode_segmentation(const AnatomyTemplate& z, const Deformation& inverse) {
  SegOutput out;
  out.template_probs = decode_template_segmentation(z.z);
  out.probs = warp(out.template_probs, inverse.displacement);
  return out;
}

ReconOutput ModelImpl::decode_reconstruction(const AnatomyTemplate& z, const torch::Tensor& style,
                                             const Deformation& inverse) {
  auto raw = recon_decoder->forward(z.z, style);
  ReconOutput out;
  out.template_loc = raw.narrow(1, 0, 1);
  out.template_scale = torch::softplus(raw.narrow(1, 1, 1)) + kLaplaceScaleFloor;
  auto warped = warp(torch::cat({out.template_loc, out.template_scale}, 1), inverse.displacement);
  out.loc = warped.narrow(1, 0, 1);
  out.scale = warped.narrow(1, 1, 1);
  return out;
}

ForwardProducts ModelImpl::forward(const torch::Tensor& x, SampleMode mode,
                                   std::optional<at::Generator> gen) {
  ForwardProducts p;
  p.content = encode_content(x);
  p.weights = infer_weights(p.content.front());
  p.posteriors = posteriors(p.weights);
  p.z = sample_template(p.posteriors, mode, gen);
  p.style = encode_style(x);
  p.deformation = infer_velocity_stack(p.content, p.z, mode, gen);
  p.seg = decode_segmentation(p.z, p.deformation.inverse);
  p.recon = decode_reconstruction(p.z, p.style, p.deformation.inverse);
  return p;
}

std::vector<torch::Tensor> ModelImpl::group_parameters(const std::string& group) const {
  if (std::find(kParameterGroups.begin(), kParameterGroups.end(), group) == kParameterGroups.end()) {
    throw ConfigError("unknown parameter group '" + group + "'");
  }
  std::vector<torch::Tensor> out;
  const auto prefix = group + ".";
  for (const auto& item : named_parameters()) {
    if (item.key().rfind(prefix, 0) == 0) out.push_back(item.value());
  }
  return out;
}

AttentionUNetImpl::AttentionUNetImpl(const ModelConfig& cfg) {
  encoder = register_module("encoder", ContentEncoder(cfg));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(encoder->finest_channels(),
                                                              cfg.num_classes + 1, 1)));
}

torch::Tensor AttentionUNetImpl::forward(const torch::Tensor& x) {
  encoder->forward(x);
  return torch::softmax(head->forward(encoder->finest_features()), 1);
}

}  // namespace udaseg
