#pragma once

// Mixture-of-experts teacher over the K expert perspectives.
//
// Visual tokens (one per expert latent) pass through self-attention, then
// cross-attention against the K text tokens of the same sample, and are
// mean-pooled into F_C. A gate scores each expert from [F_C, mean text] and the
// teacher logits are the gate-weighted sum of per-expert ReID heads m_k(F_C).

#include <vector>

#include "mikecoco/nn.hpp"

namespace mikecoco::moe {

using ag::Index;
using ag::Tensor;

struct MoeConfig {
  int experts = 2;
  int dim = 64;
  int num_ids = 8;
  int heads = 2;
};

struct TeacherOutput {
  Tensor fused;         // b x d
  Tensor gate_weights;  // b x K, rows on the simplex
  Tensor z_t;           // b x N_id
};

class MoeTeacher {
 public:
  MoeTeacher(const MoeConfig& config, std::uint64_t seed);

  const MoeConfig& config() const { return config_; }

  // visual and text are (b*K) x d, row n*K + k.
  Tensor fuse(const Tensor& visual, const Tensor& text, Index batch) const;
  Tensor gate(const Tensor& fused, const Tensor& text_pooled) const;
  Tensor teacher_logits(const Tensor& fused, const Tensor& gate_weights) const;
  TeacherOutput forward(const Tensor& visual, const Tensor& text, Index batch) const;

  // Overwrites head k's weight (d x N_id) and zeroes its bias.
  void set_head(int k, const ag::Matrix& weight);

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  std::vector<nn::Linear>& heads() { return heads_; }
  nn::Linear& gate_layer() { return gate_; }

 private:
  MoeConfig config_;
  nn::ParameterSet params_;
  nn::MultiHeadAttention self_attn_;
  nn::MultiHeadAttention cross_attn_;
  nn::Linear gate_;
  std::vector<nn::Linear> heads_;
};

// Mean over rows of sum_c p_c log(p_c / q_c), p = softmax(z_s), q = softmax(z_t).
// With `reverse` the arguments swap: KL(q || p).
Tensor distill_loss(const Tensor& z_s, const Tensor& z_t, bool reverse = false);

}  // namespace mikecoco::moe
