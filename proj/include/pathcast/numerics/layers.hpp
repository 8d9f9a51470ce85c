// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pathcast/numerics/tape.hpp"

namespace pathcast::num {

/// y = W x + b
struct Affine {
  Parameter weight;
  Parameter bias;

  Affine() = default;
  Affine(const std::string& prefix, std::size_t in, std::size_t out)
      : weight(prefix + ".w", Tensor(Shape{out, in})), bias(prefix + ".b", Tensor(Shape{out})) {}

  std::size_t in_dim() const { return weight.value.cols(); }
  std::size_t out_dim() const { return weight.value.rows(); }

  template <class Rng>
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim()));
    fill_uniform(weight.value, bound, rng);
    fill_uniform(bias.value, bound, rng);
  }

  struct Bound {
    Var w, b;
  };
  Bound bind(Tape& t) { return {t.param(weight), t.param(bias)}; }
  Bound bind_frozen(Tape& t) const { return {t.constant(weight.value), t.constant(bias.value)}; }

  static Var apply(Tape& t, const Bound& p, Var x) { return t.add(t.matvec(p.w, x), p.b); }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

/// Gated recurrent unit with the reset gate applied to the previous state
/// before the candidate projection:
///   r = sigmoid(W_r [e, f] + b_r)
///   u = sigmoid(W_u [e, f] + b_u)
///   c = tanh(W_c [e, r*f] + b_c)
///   f' = (1 - u) * f + u * c
struct GruCell {
  Affine reset;
  Affine update;
  Affine candidate;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;

  GruCell() = default;
  GruCell(const std::string& prefix, std::size_t input, std::size_t hidden_size)
      : reset(prefix + ".reset", input + hidden_size, hidden_size),
        update(prefix + ".update", input + hidden_size, hidden_size),
        candidate(prefix + ".candidate", input + hidden_size, hidden_size),
        input_dim(input),
        hidden(hidden_size) {}

  template <class Rng>
  void init(Rng& rng) {
    // fan-in of the hidden size, as recurrent cells conventionally do
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (Parameter* p : parameters()) fill_uniform(p->value, bound, rng);
  }

  struct Bound {
    Affine::Bound r, u, c;
  };
  Bound bind(Tape& t) { return {reset.bind(t), update.bind(t), candidate.bind(t)}; }
  Bound bind_frozen(Tape& t) const { return {reset.bind_frozen(t), update.bind_frozen(t), candidate.bind_frozen(t)}; }

  static Var step(Tape& t, const Bound& p, Var e, Var f_prev) {
    Var ef = t.concat(e, f_prev);
    Var r = t.sigmoid(Affine::apply(t, p.r, ef));
    Var u = t.sigmoid(Affine::apply(t, p.u, ef));
    Var c = t.tanh(Affine::apply(t, p.c, t.concat(e, t.mul(r, f_prev))));
    return t.add(t.mul(t.one_minus(u), f_prev), t.mul(u, c));
  }

  std::vector<Parameter*> parameters() {
    return {&reset.weight, &reset.bias, &update.weight, &update.bias, &candidate.weight, &candidate.bias};
  }
};

/// Value-level GRU update used outside of training.
inline Tensor gru_step(const GruCell& cell, const Tensor& e, const Tensor& f_prev) {
  if (e.rank() != 1 || e.size() != cell.input_dim || f_prev.rank() != 1 || f_prev.size() != cell.hidden)
    throw Error(ErrorCode::ShapeMismatch, "gru_step input " + shape_string(e.shape) + ", state " +
                                              shape_string(f_prev.shape));
  Tape t;
  auto p = cell.bind_frozen(t);
  Var out = GruCell::step(t, p, t.constant(e), t.constant(f_prev));
  return t.value(out);
}

}  // namespace pathcast::num
