#pragma once

// Visual-text contrastive losses, identity losses and the two stage-level
// aggregates. Every loss is a differentiable 1x1 Tensor.
//
// Expert latents come as K tensors of shape b x d; text features come as an
// (N_id * K) x d table with row identity * K + expert.

#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mikecoco/autograd.hpp"

namespace mikecoco::objectives {

using ag::Tensor;

enum class Stage { None, Stage1, Stage2 };
const char* stage_name(Stage s);

struct LossReport {
  std::vector<std::pair<std::string, double>> components;
  double weighted_total = 0.0;
  Stage stage = Stage::None;

  double get(const std::string& name) const;
  nlohmann::json to_json() const;
};

struct WeightedLoss {
  Tensor total;
  LossReport report;
};

// sum_i weight_i * value_i accumulated in extended precision, so the reported
// total is the correctly rounded value rather than one order's rounding.
double weighted_sum(std::initializer_list<std::pair<double, double>> terms);

// (1 - eps) one-hot + eps / classes, one row per label.
ag::Matrix smoothed_targets(std::span<const int> labels, int classes, double eps);
// Mean over rows of -sum_c q_c log softmax(z)_c.
Tensor cross_entropy(const Tensor& logits, const ag::Matrix& targets);

// For each expert k: image latent f_n^k against every identity text T_a^k
// (cross-entropy over identities), averaged over the batch; summed over experts.
Tensor loss_v2t(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                double logit_scale);
// For each expert k: text anchor T_{y_n}^k against the batch latents f_a^k, with
// the batch members sharing y_n (anchor included) as positives; averaged over
// positives and batch, summed over experts.
Tensor loss_t2v(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                double logit_scale);
// (1/K) sum_k smoothed cross-entropy of s(f_n^k, T_a^k) over identities a.
Tensor loss_v2tce(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                  double logit_scale, double eps);
// Smoothed cross-entropy of classifier logits (b x N_id).
Tensor loss_id(const Tensor& logits, std::span<const int> identities, double eps);

// L_MEKA + L_v2t + L_t2v; the report lists the MEKA components then L_v2t, L_t2v.
WeightedLoss stage1_total(const WeightedLoss& meka, const Tensor& v2t, const Tensor& t2v);
// alpha1 L_ID + alpha2 L_v2tce + L_dis.
WeightedLoss stage2_total(const Tensor& id, const Tensor& v2tce, const Tensor& distill, double alpha1,
                          double alpha2);

}  // namespace mikecoco::objectives
