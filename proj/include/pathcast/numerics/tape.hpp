// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pathcast/numerics/tensor.hpp"

namespace pathcast::num {

/// A named trainable tensor with its accumulated gradient.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : value(std::move(value)), grad(Tensor::zeros_like(this->value)), name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }

  Tensor value;
  Tensor grad;

 private:
  std::string name_;
};

/// Disjoint index blocks over a logits vector; each block is normalized on
/// its own.
struct BlockPartition {
  std::vector<std::vector<std::size_t>> blocks;

  /// Block index of every position, after checking the partition covers
  /// 0..k-1 exactly once.
  std::vector<std::size_t> owner(std::size_t k) const {
    std::vector<std::size_t> own(k, std::numeric_limits<std::size_t>::max());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].empty()) throw Error(ErrorCode::EmptyBlock, "block " + std::to_string(b) + " is empty");
      for (std::size_t i : blocks[b]) {
        if (i >= k)
          throw Error(ErrorCode::IndexOutOfRange,
                      "block index " + std::to_string(i) + " outside logits of size " + std::to_string(k));
        if (own[i] != std::numeric_limits<std::size_t>::max())
          throw Error(ErrorCode::IndexOutOfRange, "index " + std::to_string(i) + " appears in two blocks");
        own[i] = b;
      }
    }
    for (std::size_t i = 0; i < k; ++i)
      if (own[i] == std::numeric_limits<std::size_t>::max())
        throw Error(ErrorCode::IndexOutOfRange, "index " + std::to_string(i) + " is in no block");
    return own;
  }
};

namespace detail {

// Per-block max-shifted log-sum-exp, written into `lse` for every position.
inline void block_lse(std::span<const double> z, const BlockPartition& part, std::vector<double>& lse) {
  lse.assign(z.size(), 0.0);
  for (const auto& block : part.blocks) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i : block) m = std::max(m, z[i]);
    double s = 0.0;
    for (std::size_t i : block) s += std::exp(z[i] - m);
    double l = m + std::log(s);
    for (std::size_t i : block) lse[i] = l;
  }
}

}  // namespace detail

/// p_u = exp(z_u) / sum_{w in block(u)} exp(z_w).
inline Tensor block_softmax(const Tensor& logits, const BlockPartition& partition) {
  if (logits.rank() != 1) throw Error(ErrorCode::ShapeMismatch, "block_softmax expects a vector");
  partition.owner(logits.size());
  Tensor out(logits.shape);
  for (const auto& block : partition.blocks) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i : block) m = std::max(m, logits[i]);
    double s = 0.0;
    for (std::size_t i : block) {
      out[i] = std::exp(logits[i] - m);
      s += out[i];
    }
    for (std::size_t i : block) out[i] /= s;
  }
  return out;
}

struct Var {
  std::size_t id = 0;
};

struct BackwardReport {
  /// Parameters passed to `backward` that the loss does not depend on. Their
  /// gradient contribution is zero.
  std::vector<std::string> disconnected;
};

/// Records operations for reverse-mode differentiation. Single owner; the
/// recorded order is a topological order, so `backward` walks it in reverse.
class Tape {
 public:
  Var constant(Tensor t) { return push(std::move(t), {}, nullptr); }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push(p.value, {}, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matvec(Var w, Var x) {
    const Tensor& W = value(w);
    const Tensor& X = value(x);
    if (W.rank() != 2 || X.rank() != 1 || W.cols() != X.size())
      throw Error(ErrorCode::ShapeMismatch, "matvec " + shape_string(W.shape) + " x " + shape_string(X.shape));
    const std::size_t r = W.rows(), c = W.cols();
    Tensor y(Shape{r});
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      const double* row = &W.data[i * c];
      for (std::size_t j = 0; j < c; ++j) s += row[j] * X[j];
      y[i] = s;
    }
    return push(std::move(y), {w, x}, [w, x, r, c](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& Wv = t.value(w);
      const Tensor& Xv = t.value(x);
      Tensor& dW = t.grad_ref(w);
      Tensor& dx = t.grad_ref(x);
      for (std::size_t i = 0; i < r; ++i) {
        const double g = dy[i];
        if (g == 0.0) continue;
        double* dwrow = &dW.data[i * c];
        const double* wrow = &Wv.data[i * c];
        for (std::size_t j = 0; j < c; ++j) {
          dwrow[j] += g * Xv[j];
          dx[j] += g * wrow[j];
        }
      }
    });
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor y = value(a);
    const Tensor& B = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
    return push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      accumulate(t.grad_ref(a), dy, 1.0);
      accumulate(t.grad_ref(b), dy, 1.0);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor y = value(a);
    const Tensor& B = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= B[i];
    return push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      accumulate(t.grad_ref(a), dy, 1.0);
      accumulate(t.grad_ref(b), dy, -1.0);
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor y = value(a);
    const Tensor& B = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= B[i];
    return push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& A = t.value(a);
      const Tensor& Bv = t.value(b);
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * Bv[i];
      Tensor& db = t.grad_ref(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * A[i];
    });
  }

  Var scale(Var a, double s) {
    Tensor y = value(a);
    for (double& v : y.data) v *= s;
    return push(std::move(y), {a}, [a, s](Tape& t, std::size_t self) {
      accumulate(t.grad_ref(a), t.nodes_[self].grad, s);
    });
  }

  Var one_minus(Var a) {
    Tensor y = value(a);
    for (double& v : y.data) v = 1.0 - v;
    return push(std::move(y), {a}, [a](Tape& t, std::size_t self) {
      accumulate(t.grad_ref(a), t.nodes_[self].grad, -1.0);
    });
  }

  Var tanh(Var a) {
    Tensor y = value(a);
    for (double& v : y.data) v = std::tanh(v);
    return push(std::move(y), {a}, [a](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * (1.0 - Y[i] * Y[i]);
    });
  }

  Var sigmoid(Var a) {
    Tensor y = value(a);
    for (double& v : y.data) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return push(std::move(y), {a}, [a](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * Y[i] * (1.0 - Y[i]);
    });
  }

  /// log(1 + exp(a)), computed without overflow.
  Var softplus(Var a) {
    Tensor y = value(a);
    for (double& v : y.data) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    return push(std::move(y), {a}, [a](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& A = t.value(a);
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        double z = A[i];
        double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        da[i] += dy[i] * s;
      }
    });
  }

  Var concat(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 1 || B.rank() != 1) throw Error(ErrorCode::ShapeMismatch, "concat expects vectors");
    const std::size_t na = A.size();
    Tensor y(Shape{na + B.size()});
    std::copy(A.data.begin(), A.data.end(), y.data.begin());
    std::copy(B.data.begin(), B.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(na));
    return push(std::move(y), {a, b}, [a, b, na](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      Tensor& da = t.grad_ref(a);
      Tensor& db = t.grad_ref(b);
      for (std::size_t i = 0; i < na; ++i) da[i] += dy[i];
      for (std::size_t i = na; i < dy.size(); ++i) db[i - na] += dy[i];
    });
  }

  /// Row `r` of a matrix (embedding lookup).
  Var row(Var m, std::size_t r) {
    const Tensor& M = value(m);
    if (M.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "row() expects a matrix");
    if (r >= M.rows()) throw Error(ErrorCode::IndexOutOfRange, "row " + std::to_string(r));
    const std::size_t c = M.cols();
    Tensor y(Shape{c});
    std::copy_n(M.data.begin() + static_cast<std::ptrdiff_t>(r * c), c, y.data.begin());
    return push(std::move(y), {m}, [m, r, c](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      Tensor& dm = t.grad_ref(m);
      for (std::size_t j = 0; j < c; ++j) dm.data[r * c + j] += dy[j];
    });
  }

  Var gather(Var v, std::vector<std::size_t> indices) {
    const Tensor& V = value(v);
    if (V.rank() != 1) throw Error(ErrorCode::ShapeMismatch, "gather expects a vector");
    Tensor y(Shape{indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= V.size()) throw Error(ErrorCode::IndexOutOfRange, "gather index " + std::to_string(indices[i]));
      y[i] = V[indices[i]];
    }
    return push(std::move(y), {v}, [v, idx = std::move(indices)](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      Tensor& dv = t.grad_ref(v);
      for (std::size_t i = 0; i < idx.size(); ++i) dv[idx[i]] += dy[i];
    });
  }

  Var block_softmax(Var z, const BlockPartition& partition) {
    Tensor p = num::block_softmax(value(z), partition);
    auto own = partition.owner(p.size());
    const std::size_t nblocks = partition.blocks.size();
    return push(std::move(p), {z}, [z, own = std::move(own), nblocks](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& P = t.nodes_[self].value;
      std::vector<double> dot(nblocks, 0.0);
      for (std::size_t i = 0; i < dy.size(); ++i) dot[own[i]] += P[i] * dy[i];
      Tensor& dz = t.grad_ref(z);
      for (std::size_t i = 0; i < dy.size(); ++i) dz[i] += P[i] * (dy[i] - dot[own[i]]);
    });
  }

  /// log of block_softmax, evaluated as z - lse(block).
  Var block_log_softmax(Var z, const BlockPartition& partition) {
    const Tensor& Z = value(z);
    if (Z.rank() != 1) throw Error(ErrorCode::ShapeMismatch, "block_log_softmax expects a vector");
    auto own = partition.owner(Z.size());
    std::vector<double> lse;
    detail::block_lse(Z.data, partition, lse);
    Tensor y(Z.shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = Z[i] - lse[i];
    const std::size_t nblocks = partition.blocks.size();
    return push(std::move(y), {z}, [z, own = std::move(own), nblocks](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      const Tensor& Y = t.nodes_[self].value;
      std::vector<double> total(nblocks, 0.0);
      for (std::size_t i = 0; i < dy.size(); ++i) total[own[i]] += dy[i];
      Tensor& dz = t.grad_ref(z);
      for (std::size_t i = 0; i < dy.size(); ++i) dz[i] += dy[i] - std::exp(Y[i]) * total[own[i]];
    });
  }

  Var pick(Var v, std::size_t i) {
    const Tensor& V = value(v);
    if (i >= V.size()) throw Error(ErrorCode::IndexOutOfRange, "pick index " + std::to_string(i));
    return push(Tensor::scalar(V[i]), {v}, [v, i](Tape& t, std::size_t self) {
      t.grad_ref(v)[i] += t.nodes_[self].grad[0];
    });
  }

  Var sum(Var v) {
    const Tensor& V = value(v);
    double s = 0.0;
    for (double x : V.data) s += x;
    return push(Tensor::scalar(s), {v}, [v](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad[0];
      for (double& d : t.grad_ref(v).data) d += g;
    });
  }

  /// log(sum(exp(v))) of a non-empty vector, shifted by the max.
  Var log_sum_exp(Var v) {
    const Tensor& V = value(v);
    if (V.size() == 0) throw Error(ErrorCode::ShapeMismatch, "log_sum_exp of an empty tensor");
    const double m = *std::max_element(V.data.begin(), V.data.end());
    double s = 0.0;
    for (double x : V.data) s += std::exp(x - m);
    const double y = m + std::log(s);
    return push(Tensor::scalar(y), {v}, [v, y](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad[0];
      const Tensor& A = t.value(v);
      Tensor& dv = t.grad_ref(v);
      for (std::size_t i = 0; i < A.size(); ++i) dv[i] += g * std::exp(A[i] - y);
    });
  }

  /// Sum of same-shaped tensors. An empty list is the scalar 0.
  Var add_all(std::span<const Var> terms) {
    if (terms.empty()) return constant(Tensor::scalar(0.0));
    Tensor y = value(terms[0]);
    for (std::size_t k = 1; k < terms.size(); ++k) {
      same_shape(terms[0], terms[k], "add_all");
      const Tensor& T = value(terms[k]);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += T[i];
    }
    std::vector<Var> ins(terms.begin(), terms.end());
    return push(std::move(y), ins, [ins](Tape& t, std::size_t self) {
      const Tensor& dy = t.nodes_[self].grad;
      for (Var v : ins) accumulate(t.grad_ref(v), dy, 1.0);
    });
  }

  /// Reverse sweep from a scalar `loss`; gradients are added into each bound
  /// parameter's `grad`. Every recorded operation runs at most once.
  BackwardReport backward(Var loss, std::span<Parameter* const> expected = {}) {
    if (value(loss).size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
    std::vector<bool> reached(nodes_.size(), false);
    reached[loss.id] = true;
    grad_ref(loss)[0] += 1.0;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      if (!reached[k]) continue;
      Node& node = nodes_[k];
      for (Var in : node.inputs) reached[in.id] = true;
      if (node.backward) node.backward(*this, k);
      if (node.param) accumulate(node.param->grad, node.grad, 1.0);
    }
    BackwardReport report;
    for (Parameter* p : expected) {
      auto it = param_nodes_.find(p);
      if (it == param_nodes_.end() || !reached[it->second]) report.disconnected.push_back(p->name());
    }
    return report;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    std::vector<Var> inputs;
    std::function<void(Tape&, std::size_t)> backward;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, std::vector<Var> inputs, std::function<void(Tape&, std::size_t)> backward) {
    Node node;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  Tensor& grad_ref(Var v) {
    Node& node = nodes_[v.id];
    if (!node.has_grad) {
      node.grad = Tensor::zeros_like(node.value);
      node.has_grad = true;
    }
    return node.grad;
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (value(a).shape != value(b).shape)
      throw Error(ErrorCode::ShapeMismatch, std::string(op) + " " + shape_string(value(a).shape) + " vs " +
                                                shape_string(value(b).shape));
  }

  static void accumulate(Tensor& dst, const Tensor& src, double s) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

}  // namespace pathcast::num
