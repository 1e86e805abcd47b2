#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gsid/errors.hpp"
#include "gsid/tensor.hpp"

namespace gsid {

// A trainable tensor. Gradients accumulate here across backward passes
// until zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.size(), 0.0) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] std::size_t rows() const { return value().rows(); }
  [[nodiscard]] std::size_t cols() const { return value().cols(); }
  [[nodiscard]] double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records the forward computation so backward() can run reverse-mode
// differentiation. A tape is single-use: build, backward once, discard.
class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::function<void(Tape&, std::size_t)> backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const { return record_; }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  // Leaf that forwards its gradient into `p.grad` on backward. Repeated
  // calls with the same parameter return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, {}, {}, &p, record_});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var emit(Tensor value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward) {
    const bool rg = record_ && requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg ? std::move(backward) : nullptr, nullptr, rg});
    return {this, nodes_.size() - 1};
  }

  [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, allocated as zeros on first access.
  std::vector<double>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  [[nodiscard]] bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 for a scalar root and propagates backwards.
  void backward(Var root) {
    if (!record_) throw InvalidInput("backward on a non-recording tape");
    if (root.value().size() != 1) throw ShapeError("backward root must be a scalar");
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      }
    }
  }

 private:
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on a non-scalar");
  return value().values[0];
}

namespace ops {

namespace detail {

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs) {
    if (v.tape().requires_grad(v.id())) return true;
  }
  return false;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw ShapeError("matmul: inner dimensions differ");
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nn(a.value().values.data(), b.value().values.data(), out.values.data(), m, k, n);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.emit(std::move(out), detail::any_grad({a, b}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      kernels::gemm_nt(g.data(), tp.value(bi).values.data(), tp.grad(ai).data(), m, n, k);
    }
    if (tp.requires_grad(bi)) {
      kernels::gemm_tn(tp.value(ai).values.data(), g.data(), tp.grad(bi).data(), m, k, n);
    }
  });
}

// a (m x k) times b^T where b is n x k.
inline Var matmul_nt(Var a, Var b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw ShapeError("matmul_nt: inner dimensions differ");
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nt(a.value().values.data(), b.value().values.data(), out.values.data(), m, k, n);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.emit(std::move(out), detail::any_grad({a, b}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      kernels::gemm_nn(g.data(), tp.value(bi).values.data(), tp.grad(ai).data(), m, n, k);
    }
    if (tp.requires_grad(bi)) {
      kernels::gemm_tn(g.data(), tp.value(ai).values.data(), tp.grad(bi).data(), m, n, k);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::check_same(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().emit(std::move(out), detail::any_grad({a, b}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t src : {ai, bi}) {
      if (!tp.requires_grad(src)) continue;
      auto& ga = tp.grad(src);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().emit(std::move(out), detail::any_grad({a, b}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().emit(std::move(out), detail::any_grad({a, b}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad(ai);
      const auto& bv2 = tp.value(bi).values;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad(bi);
      const auto& av = tp.value(ai).values;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// Adds a 1 x n row to every row of an m x n matrix.
inline Var add_row(Var a, Var bias) {
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().size() != n) throw ShapeError("add_row: bias length mismatch");
  Tensor out = a.value();
  const auto& bv = bias.value().values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values[i * n + j] += bv[j];
  const std::size_t ai = a.id(), bi = bias.id();
  return a.tape().emit(std::move(out), detail::any_grad({a, bias}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

// Adds a constant tensor (e.g. an attention mask); no gradient to `c`.
inline Var add_constant(Var a, const Tensor& c) {
  if (!a.value().same_shape(c)) throw ShapeError("add_constant: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += c.values[i];
  const std::size_t ai = a.id();
  return a.tape().emit(std::move(out), detail::any_grad({a}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values) v *= s;
  const std::size_t ai = a.id();
  return a.tape().emit(std::move(out), detail::any_grad({a}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

// Cuts the graph: same value, no gradient flows back.
inline Var stop_gradient(Var a) { return a.tape().constant(a.value()); }

// tanh approximation of GELU.
inline Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = a.value();
  for (double& v : out.values) {
    const double x = v;
    v = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  const std::size_t ai = a.id();
  return a.tape().emit(std::move(out), detail::any_grad({a}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(ai).values;
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = x[i];
      const double u = c * (xi + 0.044715 * xi * xi * xi);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * xi * xi);
      ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du);
    }
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values) v = std::exp(v);
  const std::size_t ai = a.id();
  return a.tape().emit(std::move(out), detail::any_grad({a}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self).values;
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

// max(a, floor) elementwise; gradient passes only where a > floor.
inline Var clamp_min(Var a, double floor) {
  Tensor out = a.value();
  for (double& v : out.values) v = std::max(v, floor);
  const std::size_t ai = a.id();
  return a.tape().emit(std::move(out), detail::any_grad({a}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(ai).values;
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > floor) ga[i] += g[i];
    }
  });
}

// Row-wise layer normalization with learned gain and bias (both 1 x n).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw ShapeError("layer_norm: gain/bias length mismatch");
  }
  Tensor out = Tensor::matrix(m, n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto& xv = x.value().values;
  const auto& gv = gain.value().values;
  const auto& bv = bias.value().values;
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mean) * is;
      (*xhat)[i * n + j] = h;
      out.values[i * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t xi_id = x.id(), gi = gain.id(), bi = bias.id();
  return x.tape().emit(std::move(out), detail::any_grad({x, gain, bias}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& gv2 = tp.value(gi).values;
    if (tp.requires_grad(gi)) {
      auto& gg = tp.grad(gi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
    if (tp.requires_grad(xi_id)) {
      auto& gx = tp.grad(xi_id);
      const double nn = static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[i * n + j] * gv2[j];
          sum_dh += dh;
          sum_dh_h += dh * (*xhat)[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[i * n + j] * gv2[j];
          gx[i * n + j] +=
              (*inv_std)[i] * (dh - sum_dh / nn - (*xhat)[i * n + j] * sum_dh_h / nn);
        }
      }
    }
  });
}

// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.values.data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      s += r[j];
    }
    for (std::size_t j = 0; j < n; ++j) r[j] /= s;
  }
  const std::size_t xi = x.id();
  return x.tape().emit(std::move(out), detail::any_grad({x}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self).values;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - s);
    }
  });
}

inline Var log_softmax_rows(Var x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.values.data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(r[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) r[j] -= lse;
  }
  const std::size_t xi = x.id();
  return x.tape().emit(std::move(out), detail::any_grad({x}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self).values;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * s;
    }
  });
}

// Selects rows of `table` by index (embedding lookup); duplicates allowed.
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const std::size_t n = table.cols(), v = table.rows();
  Tensor out = Tensor::matrix(indices.size(), n);
  const auto& tv = table.value().values;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " >= " + std::to_string(v));
    }
    std::copy_n(tv.data() + indices[i] * n, n, out.values.data() + i * n);
  }
  const std::size_t ti = table.id();
  return table.tape().emit(std::move(out), detail::any_grad({table}),
                            [=, idx = std::move(indices)](Tape& tp, std::size_t self) {
                              const auto& g = tp.grad(self);
                              auto& gt = tp.grad(ti);
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j) gt[idx[i] * n + j] += g[i * n + j];
                            });
}

inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const std::size_t n = x.cols();
  if (start + count > x.rows()) throw ShapeError("slice_rows: out of range");
  Tensor out = Tensor::matrix(count, n);
  std::copy_n(x.value().values.data() + start * n, count * n, out.values.data());
  const std::size_t xi = x.id();
  return x.tape().emit(std::move(out), detail::any_grad({x}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < count * n; ++i) gx[start * n + i] += g[i];
  });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const std::size_t m = x.rows(), n = x.cols();
  if (start + count > n) throw ShapeError("slice_cols: out of range");
  Tensor out = Tensor::matrix(m, count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.value().values.data() + i * n + start, count, out.values.data() + i * count);
  const std::size_t xi = x.id();
  return x.tape().emit(std::move(out), detail::any_grad({x}), [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += g[i * count + j];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out = Tensor::matrix(total, n);
  std::vector<std::size_t> ids, offsets;
  bool rg = false;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values.begin(), p.value().values.end(), out.values.begin() + off * n);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
    rg = rg || p.tape().requires_grad(p.id());
  }
  return parts.front().tape().emit(std::move(out), rg, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      auto& gp = tp.grad(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] * n + i];
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::matrix(m, total);
  std::vector<std::size_t> ids, offsets, widths;
  bool rg = false;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.value().values.data() + i * w, w, out.values.data() + i * total + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
    rg = rg || p.tape().requires_grad(p.id());
  }
  return parts.front().tape().emit(std::move(out), rg, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      auto& gp = tp.grad(ids[k]);
      const std::size_t w = widths[k];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + offsets[k] + j];
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values) s += v;
  const std::size_t xi = x.id();
  return x.tape().emit(Tensor::scalar(s), detail::any_grad({x}), [=](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& v : tp.grad(xi)) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Sum over rows of x[i, cols[i]].
inline Var pick_sum(Var x, std::vector<std::size_t> cols) {
  const std::size_t m = x.rows(), n = x.cols();
  if (cols.size() != m) throw ShapeError("pick_sum: one column index per row required");
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw IndexError("pick_sum: column " + std::to_string(cols[i]) + " >= " + std::to_string(n));
    s += x.value().values[i * n + cols[i]];
  }
  const std::size_t xi = x.id();
  return x.tape().emit(Tensor::scalar(s), detail::any_grad({x}), [=, c = std::move(cols)](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < m; ++i) gx[i * n + c[i]] += g;
  });
}

// Inverted dropout; identity when rate == 0.
template <typename Rng>
Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw InvalidInput("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.value().shape);
  for (double& v : mask.values) v = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, x.tape().constant(std::move(mask)));
}

}  // namespace ops
}  // namespace gsid
