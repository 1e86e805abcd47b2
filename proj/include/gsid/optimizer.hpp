#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gsid/autodiff.hpp"
#include "gsid/errors.hpp"

namespace gsid {

enum class OptimizerKind { adam, sgd };

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

struct OptimizerState {
  OptimizerOptions options;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
  // Updates rejected because a gradient was not finite.
  std::int64_t skipped_updates = 0;
};

// Adam with bias correction, or plain SGD. Moments are indexed by the
// position of each parameter in the span passed to step(), so callers must
// pass parameters in a stable order.
class Optimizer {
 public:
  explicit Optimizer(OptimizerOptions options = {}) { state_.options = options; }
  explicit Optimizer(OptimizerState state) : state_(std::move(state)) {}

  [[nodiscard]] const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }

  // Applies one update using the accumulated `grad` of each parameter.
  // Returns false (and leaves parameters untouched) when any gradient is
  // non-finite.
  bool step(std::span<Parameter* const> params) {
    for (const Parameter* p : params) {
      if (p->grad.size() != p->value.size()) throw ShapeError("optimizer: gradient shape mismatch for " + p->name);
      for (double g : p->grad) {
        if (!std::isfinite(g)) {
          ++state_.skipped_updates;
          return false;
        }
      }
    }
    const auto& o = state_.options;
    double clip = 1.0;
    if (o.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Parameter* p : params)
        for (double g : p->grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > o.clip_norm) clip = o.clip_norm / norm;
    }
    ++state_.step;
    if (o.kind == OptimizerKind::sgd) {
      for (Parameter* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value.values[i] -= o.learning_rate * clip * p->grad[i];
      return true;
    }
    if (state_.first_moment.size() != params.size()) {
      state_.first_moment.assign(params.size(), {});
      state_.second_moment.assign(params.size(), {});
    }
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(o.beta1, t);
    const double bc2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      if (m.size() != p.value.size()) {
        m.assign(p.value.size(), 0.0);
        v.assign(p.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double g = p.grad[i] * clip;
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value.values[i] -= o.learning_rate * mhat / (std::sqrt(vhat) + o.epsilon);
      }
    }
    return true;
  }

 private:
  OptimizerState state_;
};

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace gsid
