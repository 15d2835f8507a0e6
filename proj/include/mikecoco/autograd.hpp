#pragma once

// Minimal reverse-mode differentiation over dense 2-D double matrices.
//
// Every value is a rows x cols matrix; batched tensors are flattened into rows
// (for example a b x K x d latent block is stored as (b*K) x d, row n*K + k).
// A graph is built eagerly as operations run and is released when the last
// Tensor handle referring to it goes away. Nodes that do not depend on any
// trainable leaf record no backward closure, so frozen sub-networks cost only
// their forward pass.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mikecoco::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  static Tensor leaf(Matrix value, bool requires_grad);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct write access; only meaningful on leaves (optimizer updates, perturbation checks).
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 for a 1x1 root and accumulates gradients into every
// node that requires them.
void backward(const Tensor& root);

Tensor detach(const Tensor& a);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor quick_gelu(const Tensor& a);

// Broadcasts.
Tensor add_row(const Tensor& a, const Tensor& row);   // row is 1 x cols
Tensor mul_col(const Tensor& a, const Tensor& col);   // col is rows x 1, scales each row

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // 1 x cols, averaged over rows
Tensor row_sum(const Tensor& a);    // rows x 1

// Row-wise normalizations.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

// Shape manipulation.
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);
Tensor reshape(const Tensor& a, Index rows, Index cols);

// Scaled dot-product attention run independently for each of `batch` samples and
// each of `heads` column groups. q is (batch*nq) x w, k and v are (batch*nk) x w.
// With `causal`, query i only sees keys 0..i (requires nq == nk).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch, Index heads, bool causal);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace mikecoco::ag
