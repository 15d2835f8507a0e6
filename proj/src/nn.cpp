#include "mikecoco/nn.hpp"

#include <cmath>
#include <cstring>

#include "mikecoco/error.hpp"

namespace mikecoco::nn {

Tensor ParameterSet::add(const std::string& name, Matrix init) {
  require(!params_.count(name), "duplicate parameter name: " + name);
  auto t = Tensor::leaf(std::move(init), trainable_);
  params_.emplace(name, t);
  return t;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
  return it->second;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [_, t] : params_) out.push_back(t);
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += static_cast<std::size_t>(t.value().size());
  return n;
}

void ParameterSet::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (auto& [_, t] : params_) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
  }
}

void ParameterSet::zero_grad() {
  for (auto& [_, t] : params_) {
    Tensor handle = t;
    handle.zero_grad();
  }
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& [name, t] : params_) {
    mix(name.data(), name.size());
    const Index shape[2] = {t.rows(), t.cols()};
    mix(shape, sizeof(shape));
    mix(t.value().data(), sizeof(double) * static_cast<std::size_t>(t.value().size()));
  }
  return h;
}

std::size_t ParameterSet::load_from(const std::map<std::string, Matrix>& source, bool require_all) {
  std::size_t copied = 0;
  for (auto& [name, t] : params_) {
    auto it = source.find(name);
    if (it == source.end()) {
      if (require_all) throw ValidationError("checkpoint is missing parameter '" + name + "'");
      continue;
    }
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw ValidationError("parameter '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                            std::to_string(it->second.cols()) + ", expected " + std::to_string(t.rows()) + "x" +
                            std::to_string(t.cols()));
    }
    Tensor handle = t;
    handle.mutable_value() = it->second;
    ++copied;
  }
  return copied;
}

Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  if (stddev <= 0.0) return Matrix::Zero(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear Linear::create(ParameterSet& set, const std::string& name, Index in, Index out, Rng& rng, bool with_bias,
                      double stddev) {
  if (stddev < 0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = set.add(name + ".weight", gaussian(in, out, stddev, rng));
  if (with_bias) l.bias = set.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Linear Linear::near_identity(ParameterSet& set, const std::string& name, Index dim, double noise, Rng& rng) {
  Linear l;
  Matrix w = gaussian(dim, dim, noise, rng);
  w += Matrix::Identity(dim, dim);
  l.weight = set.add(name + ".weight", std::move(w));
  l.bias = set.add(name + ".bias", Matrix::Zero(1, dim));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ag::matmul(x, weight);
  return bias.defined() ? ag::add_row(y, bias) : y;
}

LayerNorm LayerNorm::create(ParameterSet& set, const std::string& name, Index width) {
  LayerNorm ln;
  ln.gamma = set.add(name + ".weight", Matrix::Ones(1, width));
  ln.beta = set.add(name + ".bias", Matrix::Zero(1, width));
  return ln;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ag::layer_norm(x, gamma, beta); }

MultiHeadAttention MultiHeadAttention::create(ParameterSet& set, const std::string& name, Index width, Index heads,
                                              Rng& rng) {
  require(heads > 0 && width % heads == 0, name + ": width must be divisible by the head count");
  MultiHeadAttention m;
  m.q = Linear::create(set, name + ".q", width, width, rng);
  m.k = Linear::create(set, name + ".k", width, width, rng);
  m.v = Linear::create(set, name + ".v", width, width, rng);
  m.out = Linear::create(set, name + ".out", width, width, rng);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& context, Index batch, bool causal) const {
  Tensor attended = ag::attention(q(query), k(context), v(context), batch, heads, causal);
  return out(attended);
}

TransformerBlock TransformerBlock::create(ParameterSet& set, const std::string& name, Index width, Index heads,
                                          Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::create(set, name + ".ln1", width);
  b.attn = MultiHeadAttention::create(set, name + ".attn", width, heads, rng);
  b.ln2 = LayerNorm::create(set, name + ".ln2", width);
  b.fc = Linear::create(set, name + ".mlp.fc", width, 4 * width, rng);
  b.proj = Linear::create(set, name + ".mlp.proj", 4 * width, width, rng);
  return b;
}

Tensor TransformerBlock::operator()(const Tensor& x, Index batch, bool causal) const {
  Tensor h = ln1(x);
  Tensor y = ag::add(x, attn(h, h, batch, causal));
  return ag::add(y, proj(ag::quick_gelu(fc(ln2(y)))));
}

}  // namespace mikecoco::nn
