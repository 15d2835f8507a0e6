#include "mikecoco/moe.hpp"

#include "mikecoco/error.hpp"

namespace mikecoco::moe {

namespace {

// b x (b*K) averaging matrix: row n picks rows n*K .. n*K+K-1.
Tensor pooling(Index batch, int experts) {
  ag::Matrix p = ag::Matrix::Zero(batch, batch * experts);
  for (Index n = 0; n < batch; ++n) p.block(n, n * experts, 1, experts).setConstant(1.0 / experts);
  return Tensor::constant(std::move(p));
}

}  // namespace

MoeTeacher::MoeTeacher(const MoeConfig& config, std::uint64_t seed) : config_(config) {
  require(config.experts >= 1 && config.dim >= 1 && config.num_ids >= 1, "MoE teacher needs positive K, d, N_id");
  Rng rng(seed);
  self_attn_ = nn::MultiHeadAttention::create(params_, "moe.self_attn", config.dim, config.heads, rng);
  cross_attn_ = nn::MultiHeadAttention::create(params_, "moe.cross_attn", config.dim, config.heads, rng);
  gate_ = nn::Linear::create(params_, "moe.gate", 2 * config.dim, config.experts, rng, true, 0.0);
  for (int k = 0; k < config.experts; ++k) {
    heads_.push_back(nn::Linear::create(params_, "moe.head" + std::to_string(k), config.dim, config.num_ids, rng));
  }
}

Tensor MoeTeacher::fuse(const Tensor& visual, const Tensor& text, Index batch) const {
  const int K = config_.experts;
  require(batch > 0, "fuse: empty batch");
  if (visual.rows() != batch * K || text.rows() != batch * K) {
    throw ValidationError("fuse: expected " + std::to_string(K) + " expert tokens per sample for visual and text, got " +
                          std::to_string(visual.rows()) + " and " + std::to_string(text.rows()) + " rows for batch " +
                          std::to_string(batch));
  }
  require(visual.cols() == config_.dim && text.cols() == config_.dim, "fuse: feature width mismatch");
  Tensor x = ag::add(visual, self_attn_(visual, visual, batch, false));
  x = ag::add(x, cross_attn_(x, text, batch, false));
  return ag::matmul(pooling(batch, K), x);
}

Tensor MoeTeacher::gate(const Tensor& fused, const Tensor& text_pooled) const {
  require(fused.rows() == text_pooled.rows(), "gate: fused and text batch sizes differ");
  const Tensor parts[] = {fused, text_pooled};
  return ag::softmax_rows(gate_(ag::concat_cols(parts)));
}

Tensor MoeTeacher::teacher_logits(const Tensor& fused, const Tensor& gate_weights) const {
  require(gate_weights.cols() == config_.experts, "teacher_logits: gate width differs from expert count");
  Tensor z;
  for (int k = 0; k < config_.experts; ++k) {
    Tensor term = ag::mul_col(heads_[static_cast<std::size_t>(k)](fused), ag::slice_cols(gate_weights, k, 1));
    z = z.defined() ? ag::add(z, term) : term;
  }
  return z;
}

TeacherOutput MoeTeacher::forward(const Tensor& visual, const Tensor& text, Index batch) const {
  TeacherOutput out;
  out.fused = fuse(visual, text, batch);
  out.gate_weights = gate(out.fused, ag::matmul(pooling(batch, config_.experts), text));
  out.z_t = teacher_logits(out.fused, out.gate_weights);
  return out;
}

void MoeTeacher::set_head(int k, const ag::Matrix& weight) {
  require(k >= 0 && k < config_.experts, "set_head: expert index out of range");
  auto& head = heads_[static_cast<std::size_t>(k)];
  require(weight.rows() == head.weight.rows() && weight.cols() == head.weight.cols(), "set_head: shape mismatch");
  head.weight.mutable_value() = weight;
  head.bias.mutable_value().setZero();
}

Tensor distill_loss(const Tensor& z_s, const Tensor& z_t, bool reverse) {
  require(z_s.rows() == z_t.rows() && z_s.cols() == z_t.cols(), "distill_loss: logit shapes differ");
  require(z_s.value().allFinite() && z_t.value().allFinite(), "distill_loss: non-finite logits");
  const Tensor& p_logits = reverse ? z_t : z_s;
  const Tensor& q_logits = reverse ? z_s : z_t;
  Tensor log_p = ag::log_softmax_rows(p_logits);
  Tensor log_q = ag::log_softmax_rows(q_logits);
  Tensor p = ag::exp(log_p);
  return ag::scale(ag::sum(ag::mul(p, ag::sub(log_p, log_q))), 1.0 / static_cast<double>(z_s.rows()));
}

}  // namespace mikecoco::moe
