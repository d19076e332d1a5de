#include "udaseg/losses.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "udaseg/errors.hpp"
#include "udaseg/simplex.hpp"

namespace udaseg {
namespace {

constexpr double kDiceSmooth = 1e-5;

double item(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

LossWeights LossWeights::from_list(const std::array<double, 5>& l, double tau) {
  LossWeights w;
  w.seg = l[0];
  w.recon = l[1];
  w.vel = l[2];
  w.tem = l[3];
  w.structure = l[4];
  w.tau = tau;
  return w;
}

void LossWeights::validate(int64_t num_bases) const {
  std::ostringstream err;
  const auto l = as_list();
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (!(l[i] >= 0.0)) err << "lambda" << i + 1 << " must be >= 0; ";
  }
  if (!(tau > 0.0) || tau > 1.0 / static_cast<double>(num_bases) + 1e-12) {
    err << "tau must lie in (0, 1/M]; ";
  }
  if (!err.str().empty()) throw ConfigError("loss weights: " + err.str());
}

torch::Tensor recon_nll(const torch::Tensor& x, const torch::Tensor& loc, const torch::Tensor& scale) {
  if (x.sizes() != loc.sizes() || x.sizes() != scale.sizes()) {
    throw DimensionError("recon_nll: shape mismatch");
  }
  if (!(scale > 0).all().item<bool>()) throw NumericError("recon_nll: Laplacian scale must be > 0");
  auto nll = (x - loc).abs() / scale + torch::log(2.0 * scale);
  return nll.flatten(1).mean(1);
}

torch::Tensor one_hot_labels(const torch::Tensor& labels, int64_t num_classes_with_bg,
                             torch::ScalarType dtype) {
  auto lab = labels.to(torch::kLong);
  if (lab.numel() > 0 &&
      (lab.min().item<int64_t>() < 0 || lab.max().item<int64_t>() >= num_classes_with_bg)) {
    throw DataError("label value outside 0..K");
  }
  return torch::one_hot(lab, num_classes_with_bg).permute({0, 3, 1, 2}).to(dtype);
}

torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& labels) {
  const auto classes = probs.size(1);
  auto onehot = one_hot_labels(labels, classes, probs.scalar_type());
  auto logp = torch::log(probs.clamp_min(1e-12));
  auto ce = -(onehot * logp).sum(1).flatten(1).mean(1);
  auto fg_p = probs.narrow(1, 1, classes - 1).flatten(2);
  auto fg_y = onehot.narrow(1, 1, classes - 1).flatten(2);
  auto dice = (2.0 * (fg_p * fg_y).sum(2) + kDiceSmooth) / (fg_p.sum(2) + fg_y.sum(2) + kDiceSmooth);
  return ce + (1.0 - dice.mean(1));
}

torch::Tensor usage_loss(const torch::Tensor& weights, double tau) {
  return torch::relu(tau - weights.mean(0)).sum();
}

torch::Tensor label_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  const auto classes = a.size(0);
  auto fa = a.narrow(0, 1, classes - 1).flatten(1);
  auto fb = b.narrow(0, 1, classes - 1).flatten(1);
  auto dice = (2.0 * (fa * fb).sum(1) + kDiceSmooth) / (fa.sum(1) + fb.sum(1) + kDiceSmooth);
  return dice.mean();
}

torch::Tensor struct_loss(const torch::Tensor& warped_labels, const torch::Tensor& weights) {
  const auto b = warped_labels.size(0);
  if (b < 2) {
    std::cerr << "warning: struct_loss needs at least two labeled samples; returning 0\n";
    return torch::zeros({}, weights.options());
  }
  // All pairs i < j at once.
  auto idx = torch::triu_indices(b, b, 1, torch::TensorOptions().dtype(torch::kLong));
  auto i = idx[0];
  auto j = idx[1];
  const auto classes = warped_labels.size(1);
  auto fg = warped_labels.narrow(1, 1, classes - 1).flatten(2);  // [B, K, P]
  auto fi = fg.index_select(0, i);
  auto fj = fg.index_select(0, j);
  auto dice = (2.0 * (fi * fj).sum(2) + kDiceSmooth) / (fi.sum(2) + fj.sum(2) + kDiceSmooth);
  auto sim = dice.mean(1);
  auto c = batched::fr_similarity(weights.index_select(0, i), weights.index_select(0, j));
  return (sim - c).square().sum();
}

torch::Tensor velocity_term(const DeformationStack& stack, const VelocityPrior& prior) {
  // Normalized by the image pixel count, like the per-pixel recon and seg terms.
  const auto& full = stack.forward.displacement;
  const double pixels = static_cast<double>(full.size(2) * full.size(3));
  torch::Tensor total;
  for (const auto& v : stack.velocities) {
    auto kl = velocity_kl(v, prior.smooth, prior.magnitude);
    total = total.defined() ? total + kl : kl;
  }
  return total / pixels;
}

ElboTerms elbo_terms(const torch::Tensor& x, const ForwardProducts& fwd, const torch::Tensor* labels,
                     const VelocityPrior& prior) {
  ElboTerms t;
  t.recon = recon_nll(x, fwd.recon.loc, fwd.recon.scale);
  if (labels) t.seg = seg_loss(fwd.seg.probs, *labels);
  t.vel = velocity_term(fwd.deformation, prior);
  return t;
}

torch::Tensor elbo_source(const ElboTerms& t, const LossWeights& w) {
  if (!t.seg.defined()) throw DataError("elbo_source requires labels");
  return -w.seg * t.seg - w.recon * t.recon - w.vel * t.vel;
}

torch::Tensor elbo_target(const ElboTerms& t, const LossWeights& w) {
  return -w.recon * t.recon - w.vel * t.vel;
}

const std::vector<std::string>& LossReport::column_names() {
  static const std::vector<std::string> names{"recon_s", "recon_t", "seg",     "vel_s",
                                              "vel_t",   "lb_s",    "lb_t",    "tem",
                                              "usage_s", "usage_t", "struct",  "total"};
  return names;
}

std::vector<double> LossReport::values() const {
  return {recon_s, recon_t, seg, vel_s, vel_t, lb_s, lb_t, tem, usage_s, usage_t, structure, total};
}

torch::Tensor template_term(const BasisBankImpl& bank) {
  return surrogate_template_loss(bank, Reduction::kElementMean);
}

torch::Tensor struct_term(const SourceBatch& s, int64_t num_classes_with_bg) {
  auto onehot = one_hot_labels(s.labels, num_classes_with_bg, s.fwd.weights.scalar_type());
  auto warped = warp(onehot, s.fwd.deformation.forward.displacement);
  return struct_loss(warped, s.fwd.weights);
}

namespace {

struct SourceParts {
  torch::Tensor lb, usage, structure;
  ElboTerms terms;
};

SourceParts source_parts(const SourceBatch& s, const LossWeights& w, const VelocityPrior& prior) {
  SourceParts p;
  p.terms = elbo_terms(s.x, s.fwd, &s.labels, prior);
  p.lb = elbo_source(p.terms, w).mean();
  p.usage = w.usage_enabled ? usage_loss(s.fwd.weights, w.tau) : s.fwd.weights.new_zeros({});
  p.structure = struct_term(s, s.fwd.seg.probs.size(1));
  return p;
}

struct TargetParts {
  torch::Tensor lb, usage;
  ElboTerms terms;
};

TargetParts target_parts(const TargetBatch& t, const LossWeights& w, const VelocityPrior& prior) {
  TargetParts p;
  p.terms = elbo_terms(t.x, t.fwd, nullptr, prior);
  p.lb = elbo_target(p.terms, w).mean();
  p.usage = w.usage_enabled ? usage_loss(t.fwd.weights, w.tau) : t.fwd.weights.new_zeros({});
  return p;
}

void fill_source(LossReport& r, const SourceParts& p) {
  r.recon_s = item(p.terms.recon.mean());
  r.seg = item(p.terms.seg.mean());
  r.vel_s = item(p.terms.vel.mean());
  r.lb_s = item(p.lb);
  r.usage_s = item(p.usage);
  r.structure = item(p.structure);
}

void fill_target(LossReport& r, const TargetParts& p) {
  r.recon_t = item(p.terms.recon.mean());
  r.vel_t = item(p.terms.vel.mean());
  r.lb_t = item(p.lb);
  r.usage_t = item(p.usage);
}

}  // namespace

LossReport stage_loss_sa(const SourceBatch& s, const TargetBatch& t, const BasisBankImpl& bank,
                         const LossWeights& w, const VelocityPrior& prior) {
  auto sp = source_parts(s, w, prior);
  auto tp = target_parts(t, w, prior);
  auto tem = template_term(bank);
  LossReport r;
  r.objective = -0.5 * (sp.lb + tp.lb) + w.tem * tem + w.structure * sp.structure +
                0.5 * (sp.usage + tp.usage);
  fill_source(r, sp);
  fill_target(r, tp);
  r.tem = item(tem);
  r.total = item(r.objective);
  return r;
}

LossReport stage_loss_sf1(const SourceBatch& s, const BasisBankImpl& bank, const LossWeights& w,
                          const VelocityPrior& prior) {
  auto sp = source_parts(s, w, prior);
  auto tem = template_term(bank);
  LossReport r;
  r.objective = -sp.lb + w.tem * tem + w.structure * sp.structure + sp.usage;
  fill_source(r, sp);
  r.tem = item(tem);
  r.total = item(r.objective);
  return r;
}

LossReport stage_loss_sf2(const TargetBatch& t, const LossWeights& w, const VelocityPrior& prior) {
  auto tp = target_parts(t, w, prior);
  LossReport r;
  r.objective = -tp.lb + tp.usage;
  fill_target(r, tp);
  r.total = item(r.objective);
  return r;
}

}  // namespace udaseg
