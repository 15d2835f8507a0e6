#include "mikecoco/objectives.hpp"

#include "mikecoco/encoders.hpp"
#include "mikecoco/error.hpp"

namespace mikecoco::objectives {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Stage1:
      return "stage1";
    case Stage::Stage2:
      return "stage2";
    default:
      return "none";
  }
}

double LossReport::get(const std::string& name) const {
  for (const auto& [k, v] : components)
    if (k == name) return v;
  throw ValidationError("loss report has no component '" + name + "'");
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : components) j[k] = v;
  j["total"] = weighted_total;
  j["stage"] = stage_name(stage);
  return j;
}

double weighted_sum(std::initializer_list<std::pair<double, double>> terms) {
  long double acc = 0.0L;
  for (const auto& [weight, value] : terms) acc += static_cast<long double>(weight) * value;
  return static_cast<double>(acc);
}

ag::Matrix smoothed_targets(std::span<const int> labels, int classes, double eps) {
  require(classes >= 1, "need at least one class");
  ag::Matrix q = ag::Matrix::Constant(static_cast<ag::Index>(labels.size()), classes, eps / classes);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= classes) {
      throw ValidationError("label " + std::to_string(labels[n]) + " outside [0, " + std::to_string(classes) + ")");
    }
    q(static_cast<ag::Index>(n), labels[n]) += 1.0 - eps;
  }
  return q;
}

Tensor cross_entropy(const Tensor& logits, const ag::Matrix& targets) {
  require(targets.rows() == logits.rows() && targets.cols() == logits.cols(), "cross_entropy: target shape mismatch");
  Tensor nll = ag::mul(ag::log_softmax_rows(logits), Tensor::constant(targets));
  return ag::scale(ag::sum(nll), -1.0 / static_cast<double>(logits.rows()));
}

namespace {

struct Layout {
  int experts;
  int num_ids;
};

Layout check_layout(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities) {
  require(!latents.empty(), "need at least one expert latent block");
  const auto experts = static_cast<int>(latents.size());
  require(text_table.rows() % experts == 0, "text table rows must be a multiple of the expert count");
  const auto num_ids = static_cast<int>(text_table.rows() / experts);
  for (const auto& l : latents) {
    require(l.rows() == static_cast<ag::Index>(identities.size()), "latent batch size and label count differ");
    require(l.cols() == text_table.cols(), "latent and text feature widths differ");
  }
  for (int y : identities) {
    if (y < 0 || y >= num_ids) {
      throw ValidationError("batch identity " + std::to_string(y) + " has no entry in the prompt table (" +
                            std::to_string(num_ids) + " identities)");
    }
  }
  return {experts, num_ids};
}

Tensor expert_text(const Tensor& text_table, int expert, int experts, int num_ids) {
  std::vector<ag::Index> rows;
  for (int a = 0; a < num_ids; ++a) rows.push_back(static_cast<ag::Index>(a) * experts + expert);
  return ag::gather_rows(text_table, rows);
}

}  // namespace

Tensor loss_v2t(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                double logit_scale) {
  const auto [K, N] = check_layout(latents, text_table, identities);
  const ag::Matrix targets = smoothed_targets(identities, N, 0.0);
  Tensor total;
  for (int k = 0; k < K; ++k) {
    Tensor logits = model::similarity_matrix(latents[static_cast<std::size_t>(k)], expert_text(text_table, k, K, N),
                                             logit_scale);
    Tensor term = cross_entropy(logits, targets);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return total;
}

Tensor loss_t2v(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                double logit_scale) {
  const auto [K, N] = check_layout(latents, text_table, identities);
  const auto b = static_cast<ag::Index>(identities.size());
  // Row n: positives are the batch members with identity y_n, weighted 1/|P(y_n)|.
  ag::Matrix positives = ag::Matrix::Zero(b, b);
  for (ag::Index n = 0; n < b; ++n) {
    for (ag::Index a = 0; a < b; ++a) positives(n, a) = identities[n] == identities[a] ? 1.0 : 0.0;
    positives.row(n) /= positives.row(n).sum();
  }
  std::vector<ag::Index> anchor_rows;
  Tensor total;
  for (int k = 0; k < K; ++k) {
    anchor_rows.clear();
    for (int y : identities) anchor_rows.push_back(static_cast<ag::Index>(y) * K + k);
    Tensor anchors = ag::gather_rows(text_table, anchor_rows);
    Tensor logits = model::similarity_matrix(anchors, latents[static_cast<std::size_t>(k)], logit_scale);
    Tensor term = cross_entropy(logits, positives);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return total;
}

Tensor loss_v2tce(std::span<const Tensor> latents, const Tensor& text_table, std::span<const int> identities,
                  double logit_scale, double eps) {
  const auto [K, N] = check_layout(latents, text_table, identities);
  const ag::Matrix targets = smoothed_targets(identities, N, eps);
  Tensor total;
  for (int k = 0; k < K; ++k) {
    Tensor logits = model::similarity_matrix(latents[static_cast<std::size_t>(k)], expert_text(text_table, k, K, N),
                                             logit_scale);
    Tensor term = cross_entropy(logits, targets);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / K);
}

Tensor loss_id(const Tensor& logits, std::span<const int> identities, double eps) {
  require(logits.rows() == static_cast<ag::Index>(identities.size()), "loss_id: logits rows and label count differ");
  require(logits.value().allFinite(), "loss_id: non-finite logits");
  return cross_entropy(logits, smoothed_targets(identities, static_cast<int>(logits.cols()), eps));
}

WeightedLoss stage1_total(const WeightedLoss& meka, const Tensor& v2t, const Tensor& t2v) {
  WeightedLoss out;
  out.total = ag::add(ag::add(meka.total, v2t), t2v);
  out.report.stage = Stage::Stage1;
  out.report.components = meka.report.components;
  out.report.components.emplace_back("L_v2t", v2t.item());
  out.report.components.emplace_back("L_t2v", t2v.item());
  out.report.weighted_total = weighted_sum({{1.0, meka.report.weighted_total}, {1.0, v2t.item()}, {1.0, t2v.item()}});
  return out;
}

WeightedLoss stage2_total(const Tensor& id, const Tensor& v2tce, const Tensor& distill, double alpha1,
                          double alpha2) {
  WeightedLoss out;
  out.total = ag::add(ag::add(ag::scale(id, alpha1), ag::scale(v2tce, alpha2)), distill);
  out.report.stage = Stage::Stage2;
  out.report.components = {{"L_ID", id.item()}, {"L_v2tce", v2tce.item()}, {"L_dis", distill.item()}};
  out.report.weighted_total = weighted_sum({{alpha1, id.item()}, {alpha2, v2tce.item()}, {1.0, distill.item()}});
  return out;
}

}  // namespace mikecoco::objectives
