#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gsid/autodiff.hpp"
#include "gsid/errors.hpp"

namespace gsid {

// Denominator floor used by every KL divergence in the library.
inline constexpr double kKlFloor = 1e-9;

inline std::vector<double> softmax(std::span<const double> x, double temperature = 1.0) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidInput("softmax: temperature must be positive and finite");
  }
  if (x.empty()) throw InvalidInput("softmax: empty input");
  for (double v : x) {
    if (!std::isfinite(v)) throw InvalidInput("softmax: non-finite input");
  }
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp((x[i] - mx) / temperature);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

inline std::vector<double> log_softmax(std::span<const double> x, double temperature = 1.0) {
  auto p = softmax(x, temperature);
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp((v - mx) / temperature);
  const double lse = std::log(s);
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = (x[i] - mx) / temperature - lse;
  return p;
}

// -sum_k log_probs[k][targets[k]].
inline double nll_loss(const std::vector<std::vector<double>>& log_probs, std::span<const int> targets) {
  if (log_probs.size() != targets.size()) throw ShapeError("nll_loss: one target per position required");
  double loss = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const int y = targets[k];
    if (y < 0 || static_cast<std::size_t>(y) >= log_probs[k].size()) {
      throw IndexError("nll_loss: target " + std::to_string(y) + " out of range at position " +
                       std::to_string(k));
    }
    loss -= log_probs[k][static_cast<std::size_t>(y)];
  }
  return loss;
}

// KL(p || q) in nats; q is clamped below at `floor`, and 0 * log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q, double floor = kKlFloor) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor)));
  }
  return std::max(kl, 0.0);
}

namespace ops {

// Sum over rows of KL(softmax(p_logits[i]) || softmax(q_logits[i])), with
// the q probabilities floored at `floor` (in log space).
inline Var kl_from_logits(Var p_logits, Var q_logits, double floor = kKlFloor) {
  detail::check_same(p_logits, q_logits, "kl_from_logits");
  Var log_p = log_softmax_rows(p_logits);
  Var log_q = clamp_min(log_softmax_rows(q_logits), std::log(floor));
  return sum(mul(exp(log_p), sub(log_p, log_q)));
}

// Negative log-likelihood of `targets` under row-wise softmax(logits).
inline Var nll_from_logits(Var logits, std::vector<std::size_t> targets) {
  return scale(pick_sum(log_softmax_rows(logits), std::move(targets)), -1.0);
}

}  // namespace ops
}  // namespace gsid
