// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pathcast/numerics/tape.hpp"

namespace pathcast::num {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters are registered in groups, each with
/// its own learning rate; moments are kept per parameter in registration order.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Returns the group index.
  std::size_t add_group(std::vector<Parameter*> params, double lr) {
    for (Parameter* p : params) {
      slots_.push_back(Slot{p, Tensor::zeros_like(p->value), Tensor::zeros_like(p->value), groups_.size()});
    }
    groups_.push_back(lr);
    return groups_.size() - 1;
  }

  void set_lr(std::size_t group, double lr) { groups_.at(group) = lr; }
  double lr(std::size_t group) const { return groups_.at(group); }
  std::uint64_t steps() const noexcept { return step_; }

  /// One update from the gradients currently stored in the parameters.
  void step() {
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (auto& s : slots_) {
      Parameter& p = *s.param;
      if (p.grad.shape != p.value.shape || s.m.shape != p.value.shape)
        throw Error(ErrorCode::ShapeMismatch, "adam: gradient/moment shape differs from " + p.name());
      const double lr = groups_[s.group];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
        const double m_hat = s.m[i] / c1;
        const double v_hat = s.v[i] / c2;
        p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
  }

 private:
  struct Slot {
    Parameter* param;
    Tensor m;
    Tensor v;
    std::size_t group;
  };

  AdamConfig config_;
  std::vector<Slot> slots_;
  std::vector<double> groups_;
  std::uint64_t step_ = 0;
};

}  // namespace pathcast::num
