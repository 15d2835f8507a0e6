#include "mikecoco/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "mikecoco/error.hpp"

namespace mikecoco::ag {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor Tensor::constant(Matrix value) { return leaf(std::move(value), false); }

Tensor Tensor::leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

double Tensor::item() const {
  require(rows() == 1 && cols() == 1, "item() called on a non-scalar tensor");
  return node_->value(0, 0);
}

namespace {

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Matrix value, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

Tensor make_result_n(Matrix value, std::span<const Tensor> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& t : inputs) {
    if (t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
  }
}

}  // namespace

void backward(const Tensor& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward() requires a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return make_result(std::move(v), {&a, &b}, [](Node& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Matrix g(A.rows(), A.cols());
      g.noalias() = self.grad * B.transpose();
      self.parents[0]->accumulate(g);
    }
    if (wants(self, 1)) {
      Matrix g(B.rows(), B.cols());
      g.noalias() = A.transpose() * self.grad;
      self.parents[1]->accumulate(g);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix v(a.rows(), b.rows());
  v.noalias() = a.value() * b.value().transpose();
  return make_result(std::move(v), {&a, &b}, [](Node& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Matrix g(A.rows(), A.cols());
      g.noalias() = self.grad * B;
      self.parents[0]->accumulate(g);
    }
    if (wants(self, 1)) {
      Matrix g(B.rows(), B.cols());
      g.noalias() = self.grad.transpose() * A;
      self.parents[1]->accumulate(g);
    }
  });
}

Tensor transpose(const Tensor& a) {
  Matrix v = a.value().transpose();
  return make_result(std::move(v), {&a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(-self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[1]->value));
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_result(a.value() * s, {&a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return make_result(a.value().array() + s, {&a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Tensor square(const Tensor& a) {
  return make_result(a.value().array().square(), {&a}, [](Node& self) {
    self.parents[0]->accumulate(2.0 * self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Tensor exp(const Tensor& a) {
  return make_result(a.value().array().exp(), {&a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.value));
  });
}

Tensor log(const Tensor& a) {
  return make_result(a.value().array().log(), {&a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseQuotient(self.parents[0]->value));
  });
}

Tensor quick_gelu(const Tensor& a) {
  constexpr double k = 1.702;
  Matrix sig = (1.0 + (-k * a.value().array()).exp()).inverse();
  Matrix v = a.value().cwiseProduct(sig);
  return make_result(std::move(v), {&a}, [sig = std::move(sig), k](Node& self) {
    const auto& x = self.parents[0]->value.array();
    auto d = sig.array() + k * x * sig.array() * (1.0 - sig.array());
    self.parents[0]->accumulate((self.grad.array() * d).matrix());
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias must be 1 x cols");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(v), {&a, &row}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: scale must be rows x 1");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return make_result(std::move(v), {&a, &col}, [](Node& self) {
    const auto& A = self.parents[0]->value;
    const auto& c = self.parents[1]->value;
    if (wants(self, 0)) self.parents[0]->accumulate((self.grad.array().colwise() * c.col(0).array()).matrix());
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(A).rowwise().sum());
  });
}

Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make_result(std::move(v), {&a}, [](Node& self) {
    const auto& A = self.parents[0]->value;
    self.parents[0]->accumulate(Matrix::Constant(A.rows(), A.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  require(a.value().size() > 0, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Tensor mean_rows(const Tensor& a) {
  require(a.rows() > 0, "mean_rows of an empty tensor");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() * inv;
  return make_result(std::move(v), {&a}, [inv](Node& self) {
    const auto rows = self.parents[0]->value.rows();
    self.parents[0]->accumulate(self.grad.replicate(rows, 1) * inv);
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix v = a.value().rowwise().sum();
  return make_result(std::move(v), {&a}, [](Node& self) {
    const auto cols = self.parents[0]->value.cols();
    self.parents[0]->accumulate(self.grad.replicate(1, cols));
  });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix v = a.value();
  for (Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return make_result(std::move(v), {&a}, [](Node& self) {
    const auto& y = self.value;
    Matrix g = y.cwiseProduct(self.grad);
    Eigen::VectorXd s = g.rowwise().sum();
    g -= (y.array().colwise() * s.array()).matrix();
    self.parents[0]->accumulate(g);
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  Matrix v = a.value();
  for (Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    const double lse = m + std::log((v.row(r).array() - m).exp().sum());
    v.row(r).array() -= lse;
  }
  return make_result(std::move(v), {&a}, [](Node& self) {
    Matrix p = self.value.array().exp();
    Eigen::VectorXd s = self.grad.rowwise().sum();
    Matrix g = self.grad - (p.array().colwise() * s.array()).matrix();
    self.parents[0]->accumulate(g);
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index n = a.cols();
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          "layer_norm: gamma/beta must be 1 x cols");
  Matrix xhat(a.rows(), n);
  Eigen::VectorXd inv_std(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    const double mu = a.value().row(r).mean();
    auto centered = a.value().row(r).array() - mu;
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_result(std::move(v), {&a, &gamma, &beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n](Node& self) {
                       const auto& G = self.grad;
                       if (wants(self, 1)) self.parents[1]->accumulate(G.cwiseProduct(xhat).colwise().sum());
                       if (wants(self, 2)) self.parents[2]->accumulate(G.colwise().sum());
                       if (wants(self, 0)) {
                         const auto& gam = self.parents[1]->value;
                         Matrix gx = G.array().rowwise() * gam.row(0).array();
                         Matrix out(gx.rows(), n);
                         for (Index r = 0; r < gx.rows(); ++r) {
                           const double m1 = gx.row(r).mean();
                           const double m2 = gx.row(r).dot(xhat.row(r)) / static_cast<double>(n);
                           out.row(r) = inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
                         }
                         self.parents[0]->accumulate(out);
                       }
                     });
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r) {
    if (norms(r) < eps) throw ValidationError("l2_normalize_rows: zero-norm row " + std::to_string(r));
  }
  Matrix v = a.value().array().colwise() / norms.array();
  return make_result(std::move(v), {&a}, [norms = std::move(norms)](Node& self) {
    const auto& y = self.value;
    Eigen::VectorXd dots = y.cwiseProduct(self.grad).rowwise().sum();
    Matrix g = self.grad - (y.array().colwise() * dots.array()).matrix();
    g = g.array().colwise() / norms.array();
    self.parents[0]->accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: range out of bounds");
  Matrix v = a.value().middleRows(start, count);
  return make_result(std::move(v), {&a}, [start, count](Node& self) {
    const auto& A = self.parents[0]->value;
    Matrix g = Matrix::Zero(A.rows(), A.cols());
    g.middleRows(start, count) = self.grad;
    self.parents[0]->accumulate(g);
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
  Matrix v = a.value().middleCols(start, count);
  return make_result(std::move(v), {&a}, [start, count](Node& self) {
    const auto& A = self.parents[0]->value;
    Matrix g = Matrix::Zero(A.rows(), A.cols());
    g.middleCols(start, count) = self.grad;
    self.parents[0]->accumulate(g);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_result_n(std::move(v), parts, [](Node& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(off, r));
      off += r;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts[0].rows();
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_result_n(std::move(v), parts, [](Node& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(off, c));
      off += c;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix v(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_result(std::move(v), {&a}, [idx = std::move(idx)](Node& self) {
    const auto& A = self.parents[0]->value;
    Matrix g = Matrix::Zero(A.rows(), A.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    self.parents[0]->accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  require(rows * cols == a.value().size(), "reshape: element count mismatch");
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_result(std::move(v), {&a}, [](Node& self) {
    const auto& A = self.parents[0]->value;
    self.parents[0]->accumulate(Eigen::Map<const Matrix>(self.grad.data(), A.rows(), A.cols()));
  });
}

}  // namespace mikecoco::ag

namespace mikecoco::ag {

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch, Index heads, bool causal) {
  require(batch > 0 && heads > 0, "attention: batch and heads must be positive");
  require(q.rows() % batch == 0 && k.rows() % batch == 0, "attention: rows not divisible by batch");
  require(k.rows() == v.rows() && k.cols() == v.cols() && q.cols() == k.cols(),
          "attention: q/k/v shapes disagree");
  require(q.cols() % heads == 0, "attention: width not divisible by head count");
  const Index nq = q.rows() / batch;
  const Index nk = k.rows() / batch;
  const Index w = q.cols();
  const Index dh = w / heads;
  require(!causal || nq == nk, "attention: causal mode needs equal query/key lengths");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[s*heads + h] is nq x nk.
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  Matrix out(q.rows(), w);
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  for (Index s = 0; s < batch; ++s) {
    for (Index h = 0; h < heads; ++h) {
      Matrix scores(nq, nk);
      scores.noalias() = Q.block(s * nq, h * dh, nq, dh) * K.block(s * nk, h * dh, nk, dh).transpose();
      scores *= inv_sqrt;
      for (Index i = 0; i < nq; ++i) {
        const Index visible = causal ? i + 1 : nk;
        const double m = scores.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Index j = 0; j < nk; ++j) {
          const double e = j < visible ? std::exp(scores(i, j) - m) : 0.0;
          scores(i, j) = e;
          total += e;
        }
        scores.row(i) /= total;
      }
      out.block(s * nq, h * dh, nq, dh).noalias() = scores * V.block(s * nk, h * dh, nk, dh);
      probs[static_cast<std::size_t>(s * heads + h)] = std::move(scores);
    }
  }

  return make_result(std::move(out), {&q, &k, &v},
                     [probs = std::move(probs), batch, heads, nq, nk, dh, inv_sqrt](Node& self) {
                       const auto& Qv = self.parents[0]->value;
                       const auto& Kv = self.parents[1]->value;
                       const auto& Vv = self.parents[2]->value;
                       const bool gq = self.parents[0]->requires_grad;
                       const bool gk = self.parents[1]->requires_grad;
                       const bool gv = self.parents[2]->requires_grad;
                       Matrix dQ, dK, dV;
                       if (gq) dQ = Matrix::Zero(Qv.rows(), Qv.cols());
                       if (gk) dK = Matrix::Zero(Kv.rows(), Kv.cols());
                       if (gv) dV = Matrix::Zero(Vv.rows(), Vv.cols());
                       for (Index s = 0; s < batch; ++s) {
                         for (Index h = 0; h < heads; ++h) {
                           const Matrix& P = probs[static_cast<std::size_t>(s * heads + h)];
                           const auto dO = self.grad.block(s * nq, h * dh, nq, dh);
                           if (gv) dV.block(s * nk, h * dh, nk, dh).noalias() += P.transpose() * dO;
                           if (!gq && !gk) continue;
                           Matrix dP(nq, nk);
                           dP.noalias() = dO * Vv.block(s * nk, h * dh, nk, dh).transpose();
                           Eigen::VectorXd rs = P.cwiseProduct(dP).rowwise().sum();
                           Matrix dS = P.cwiseProduct(dP - rs.replicate(1, nk)) * inv_sqrt;
                           if (gq) dQ.block(s * nq, h * dh, nq, dh).noalias() += dS * Kv.block(s * nk, h * dh, nk, dh);
                           if (gk) dK.block(s * nk, h * dh, nk, dh).noalias() += dS.transpose() * Qv.block(s * nq, h * dh, nq, dh);
                         }
                       }
                       if (gq) self.parents[0]->accumulate(dQ);
                       if (gk) self.parents[1]->accumulate(dK);
                       if (gv) self.parents[2]->accumulate(dV);
                     });
}

}  // namespace mikecoco::ag
