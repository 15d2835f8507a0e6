#pragma once

// Named parameter collections and the handful of layers the encoders, MEKA and
// the MoE teacher are assembled from.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mikecoco/autograd.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::nn {

using ag::Index;
using ag::Matrix;
using ag::Tensor;

// Ordered name -> leaf map. Tensors are shared handles, so layers holding a
// Tensor see every update made through the set (optimizer, checkpoint load).
class ParameterSet {
 public:
  Tensor add(const std::string& name, Matrix init);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::vector<Tensor> tensors() const;
  std::size_t scalar_count() const;

  // Trainable leaves accumulate gradients; frozen ones are treated as constants.
  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }
  void zero_grad();

  // FNV-1a over names, shapes and raw value bytes; equal hashes mean bit-identical sets.
  std::uint64_t hash() const;

  // Copies values from `source` for every name present in both; shapes must agree.
  // Returns the number of tensors copied.
  std::size_t load_from(const std::map<std::string, Matrix>& source, bool require_all);

 private:
  std::map<std::string, Tensor> params_;
  bool trainable_ = true;
};

Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, undefined when the layer has no bias

  static Linear create(ParameterSet& set, const std::string& name, Index in, Index out, Rng& rng,
                       bool with_bias = true, double stddev = -1.0);
  // Identity weight plus N(0, noise) perturbation; square layers only.
  static Linear near_identity(ParameterSet& set, const std::string& name, Index dim, double noise, Rng& rng);

  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParameterSet& set, const std::string& name, Index width);
  Tensor operator()(const Tensor& x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, out;
  Index heads = 1;

  static MultiHeadAttention create(ParameterSet& set, const std::string& name, Index width, Index heads, Rng& rng);
  // query: (batch*nq) x w, context: (batch*nk) x w.
  Tensor operator()(const Tensor& query, const Tensor& context, Index batch, bool causal) const;
};

// Pre-norm residual block: x + attn(ln1 x), then x + mlp(ln2 x).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear fc, proj;

  static TransformerBlock create(ParameterSet& set, const std::string& name, Index width, Index heads, Rng& rng);
  Tensor operator()(const Tensor& x, Index batch, bool causal) const;
};

}  // namespace mikecoco::nn
