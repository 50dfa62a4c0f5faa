// SPDX-License-Identifier: Apache-2.0
//
// Minimal trainable-network substrate: parameters with gradient and AdamW
// state, activations, losses, a batched bidirectional GRU with hand-derived
// backpropagation, finite-difference gradient checking and checkpoints.
//
// All math is double precision. Batches are stored column-major: one column
// per example.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "groundkit/error.hpp"
#include "groundkit/rng.hpp"

namespace groundkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // AdamW first moment
  Matrix v;  // AdamW second moment
  /// Columns excluded from optimization (frozen embedding rows). Empty
  /// means every column is trainable.
  std::vector<std::uint8_t> frozen_cols;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)),
        value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)),
        m(Matrix::Zero(rows, cols)),
        v(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  bool frozen(Eigen::Index col) const {
    return !frozen_cols.empty() && frozen_cols[static_cast<std::size_t>(col)] != 0;
  }

  void init_uniform(Rng& rng, double bound) {
    for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = rng.uniform(-bound, bound);
  }
};

using ParameterList = std::vector<Parameter*>;

inline void zero_grads(const ParameterList& ps) {
  for (auto* p : ps) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

/// Numerically stable softmax of a vector.
inline Vector softmax(const Vector& x) {
  if (x.size() == 0) return x;
  const double mx = x.maxCoeff();
  Vector e = (x.array() - mx).exp().matrix();
  return e / e.sum();
}

/// Column-wise softmax.
inline Matrix softmax_columns(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) out.col(c) = softmax(x.col(c));
  return out;
}

inline Matrix dense(const Matrix& weight, const Matrix& input) { return weight * input; }
inline Matrix dense(const Matrix& weight, const Matrix& input, const Vector& bias) {
  return (weight * input).colwise() + bias;
}

inline Vector hadamard(const Vector& a, const Vector& b) { return a.cwiseProduct(b); }

/// L2 normalization. A zero vector is an error unless a positive epsilon
/// floor is given, in which case the norm is clamped to it.
inline Vector l2_normalize(const Vector& x, double epsilon_floor = 0.0) {
  double n = x.norm();
  if (n == 0.0 && epsilon_floor <= 0.0) throw Error("zero norm");
  n = std::max(n, epsilon_floor);
  return x / n;
}

// ---------------------------------------------------------------------------
// Losses (mean reduction)
// ---------------------------------------------------------------------------

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Mean per-logit binary cross entropy. If grad is given it receives
/// d(loss)/d(logit).
inline double bce_per_logit(std::span<const double> logits, std::span<const double> targets,
                            std::span<double> grad = {}) {
  if (logits.size() != targets.size() || (!grad.empty() && grad.size() != logits.size()))
    throw Error("bce_per_logit: shape mismatch");
  if (logits.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = logits[i], t = targets[i];
    loss += softplus(s) - t * s;
    if (!grad.empty()) grad[i] = (sigmoid(s) - t) * inv;
  }
  return loss * inv;
}

/// Mean softmax cross entropy; logits has one column per example.
inline double cross_entropy(const Matrix& logits, std::span<const int> classes, Matrix* grad = nullptr) {
  if (static_cast<std::size_t>(logits.cols()) != classes.size()) throw Error("cross_entropy: shape mismatch");
  if (classes.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(classes.size());
  if (grad) grad->resize(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const int k = classes[static_cast<std::size_t>(c)];
    if (k < 0 || k >= logits.rows()) throw Error("cross_entropy: class id out of range");
    const double mx = logits.col(c).maxCoeff();
    const double lse = mx + std::log((logits.col(c).array() - mx).exp().sum());
    loss += lse - logits(k, c);
    if (grad) {
      grad->col(c) = ((logits.col(c).array() - lse).exp() * inv).matrix();
      (*grad)(k, c) -= inv;
    }
  }
  return loss * inv;
}

// ---------------------------------------------------------------------------
// AdamW with linear learning-rate decay
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::size_t total_steps) : cfg_(cfg), total_steps_(total_steps) {}

  /// Learning rate used by the update at schedule position `step`.
  double lr_at(std::size_t step) const {
    if (total_steps_ == 0) return cfg_.lr;
    const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps_);
    return cfg_.lr * std::max(0.0, frac);
  }

  std::size_t position() const { return step_; }
  void set_position(std::size_t step) { step_ = step; }
  const AdamWConfig& config() const { return cfg_; }
  std::size_t total_steps() const { return total_steps_; }

  void step(const ParameterList& params) {
    for (const auto* p : params)
      if (!p->grad.allFinite()) throw Error("gradient overflow in '" + p->name + "'");
    const double lr = lr_at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto* p : params) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        if (p->frozen(c)) continue;
        for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
          double& w = p->value(r, c);
          const double g = p->grad(r, c);
          double& m = p->m(r, c);
          double& v = p->v(r, c);
          w -= lr * cfg_.weight_decay * w;
          m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
          v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
          w -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        }
      }
      if (!p->value.allFinite()) throw Error("non-finite parameter '" + p->name + "' after update");
    }
  }

 private:
  AdamWConfig cfg_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences on a random
/// subset of coordinates of every parameter. `loss(backward)` must return
/// the loss and, when backward is true, accumulate gradients.
/// Coordinates where both derivatives are below `tiny` are compared
/// absolutely instead (relative error is meaningless there).
inline GradCheckResult gradient_check(const ParameterList& params, const std::function<double(bool)>& loss, Rng& rng,
                                      std::size_t coords_per_param = 12, double step = 1e-5, double tiny = 1e-7) {
  zero_grads(params);
  loss(true);
  GradCheckResult res;
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    const auto total = static_cast<std::size_t>(p->value.size());
    const std::size_t count = std::min(coords_per_param, total);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t idx = total <= coords_per_param ? c : rng.index(total);
      double& w = p->value.data()[idx];
      const double saved = w;
      w = saved + step;
      const double up = loss(false);
      w = saved - step;
      const double down = loss(false);
      w = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.data()[idx];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double diff = std::abs(a - numeric);
      const double err = scale < tiny ? (diff > 1e-9 ? 1.0 : 0.0) : diff / scale;
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = p->name + "[" + std::to_string(idx) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  zero_grads(params);
  return res;
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// One direction of a GRU layer. Gate rows are ordered reset, update, new:
///   r = sig(Wx_r x + bx_r + Wh_r h + bh_r)
///   z = sig(Wx_z x + bx_z + Wh_z h + bh_z)
///   n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
///   h' = (1 - z) * n + z * h
class GruCell {
 public:
  GruCell() = default;
  GruCell(const std::string& name, int input_dim, int hidden_dim)
      : w_x(name + ".w_x", 3 * hidden_dim, input_dim),
        w_h(name + ".w_h", 3 * hidden_dim, hidden_dim),
        b_x(name + ".b_x", 3 * hidden_dim, 1),
        b_h(name + ".b_h", 3 * hidden_dim, 1),
        hidden_(hidden_dim) {}

  Parameter w_x, w_h, b_x, b_h;

  int hidden_dim() const { return hidden_; }
  int input_dim() const { return static_cast<int>(w_x.value.cols()); }
  ParameterList parameters() { return {&w_x, &w_h, &b_x, &b_h}; }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
    for (auto* p : parameters()) p->init_uniform(rng, bound);
  }

  struct Cache {
    std::vector<Matrix> x, h_prev, r, z, n, hn;  // per step, H x B (x is D x B)
    std::vector<Matrix> h;
  };

  /// Runs the recurrence over `xs` in the given order from a zero state.
  Cache forward(const std::vector<Matrix>& xs) const {
    Cache c;
    if (xs.empty()) return c;
    const Eigen::Index H = hidden_, B = xs.front().cols();
    Matrix h = Matrix::Zero(H, B);
    for (const auto& x : xs) {
      const Matrix gx = dense(w_x.value, x, b_x.value.col(0));
      const Matrix gh = dense(w_h.value, h, b_h.value.col(0));
      Matrix r = sigmoid(gx.topRows(H) + gh.topRows(H));
      Matrix z = sigmoid(gx.middleRows(H, H) + gh.middleRows(H, H));
      Matrix hn = gh.bottomRows(H);
      Matrix n = (gx.bottomRows(H) + r.cwiseProduct(hn)).array().tanh().matrix();
      Matrix h_new = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h);
      c.x.push_back(x);
      c.h_prev.push_back(h);
      c.r.push_back(std::move(r));
      c.z.push_back(std::move(z));
      c.n.push_back(std::move(n));
      c.hn.push_back(std::move(hn));
      c.h.push_back(h_new);
      h = std::move(h_new);
    }
    return c;
  }

  /// Backpropagation through time. `dh[t]` is the loss gradient flowing
  /// into output step t from above. Returns the input gradients.
  std::vector<Matrix> backward(const Cache& c, const std::vector<Matrix>& dh) {
    const std::size_t T = c.h.size();
    std::vector<Matrix> dx(T);
    if (T == 0) return dx;
    const Eigen::Index H = hidden_, B = c.h.front().cols();
    Matrix carry = Matrix::Zero(H, B);
    Matrix dgx(3 * H, B), dgh(3 * H, B);
    for (std::size_t t = T; t-- > 0;) {
      const Matrix g = dh[t] + carry;
      const auto& r = c.r[t];
      const auto& z = c.z[t];
      const auto& n = c.n[t];
      const Matrix dn = g.cwiseProduct((1.0 - z.array()).matrix());
      const Matrix dz = g.cwiseProduct(c.h_prev[t] - n);
      const Matrix dn_pre = dn.cwiseProduct((1.0 - n.array().square()).matrix());
      const Matrix dr = dn_pre.cwiseProduct(c.hn[t]);
      dgx.topRows(H) = dr.cwiseProduct((r.array() * (1.0 - r.array())).matrix());
      dgx.middleRows(H, H) = dz.cwiseProduct((z.array() * (1.0 - z.array())).matrix());
      dgx.bottomRows(H) = dn_pre;
      dgh.topRows(H) = dgx.topRows(H);
      dgh.middleRows(H, H) = dgx.middleRows(H, H);
      dgh.bottomRows(H) = dn_pre.cwiseProduct(r);
      w_x.grad.noalias() += dgx * c.x[t].transpose();
      b_x.grad.col(0) += dgx.rowwise().sum();
      w_h.grad.noalias() += dgh * c.h_prev[t].transpose();
      b_h.grad.col(0) += dgh.rowwise().sum();
      carry = g.cwiseProduct(z);
      carry.noalias() += w_h.value.transpose() * dgh;
      dx[t].noalias() = w_x.value.transpose() * dgx;
    }
    return dx;
  }

 private:
  int hidden_ = 0;
};

/// Bidirectional GRU. Output step t is [backward state; forward state],
/// 2*H rows per example.
class BiGru {
 public:
  BiGru() = default;
  BiGru(const std::string& name, int input_dim, int hidden_dim)
      : forward_cell(name + ".fwd", input_dim, hidden_dim), backward_cell(name + ".bwd", input_dim, hidden_dim) {}

  GruCell forward_cell, backward_cell;

  int hidden_dim() const { return forward_cell.hidden_dim(); }
  ParameterList parameters() {
    auto p = forward_cell.parameters();
    for (auto* q : backward_cell.parameters()) p.push_back(q);
    return p;
  }
  void init(Rng& rng) {
    forward_cell.init(rng);
    backward_cell.init(rng);
  }

  struct Cache {
    GruCell::Cache fwd, bwd;  // bwd steps are stored in processing (reversed) order
  };

  std::vector<Matrix> forward(const std::vector<Matrix>& xs, Cache* cache = nullptr) const {
    if (xs.empty()) throw Error("gru_bidirectional: empty sequence");
    if (xs.front().rows() != forward_cell.input_dim()) throw Error("gru_bidirectional: embedding size mismatch");
    const std::vector<Matrix> reversed(xs.rbegin(), xs.rend());
    Cache local;
    Cache& c = cache ? *cache : local;
    c.fwd = forward_cell.forward(xs);
    c.bwd = backward_cell.forward(reversed);
    const std::size_t T = xs.size();
    const Eigen::Index H = hidden_dim();
    std::vector<Matrix> out(T);
    for (std::size_t t = 0; t < T; ++t) {
      out[t].resize(2 * H, xs.front().cols());
      out[t].topRows(H) = c.bwd.h[T - 1 - t];
      out[t].bottomRows(H) = c.fwd.h[t];
    }
    return out;
  }

  std::vector<Matrix> backward(const Cache& c, const std::vector<Matrix>& dout) {
    const std::size_t T = dout.size();
    const Eigen::Index H = hidden_dim();
    std::vector<Matrix> dfwd(T), dbwd(T);
    for (std::size_t t = 0; t < T; ++t) {
      dfwd[t] = dout[t].bottomRows(H);
      dbwd[T - 1 - t] = dout[t].topRows(H);
    }
    auto dx = forward_cell.backward(c.fwd, dfwd);
    const auto dxb = backward_cell.backward(c.bwd, dbwd);
    for (std::size_t t = 0; t < T; ++t) dx[t] += dxb[T - 1 - t];
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout (little-endian):
//   8 bytes   magic "GKCKPT01"
//   u32       format version (1)
//   u32       header length L, then L bytes of UTF-8 JSON metadata
//   u32       entry count
//   per entry: u32 name length, name bytes, u32 rows, u32 cols,
//              rows*cols IEEE-754 binary64 values in column-major order

inline constexpr char kCheckpointMagic[8] = {'G', 'K', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string header;  // JSON text
  std::map<std::string, Matrix> tensors;

  const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.header.size()));
  out.write(ck.header.data(), static_cast<std::streamsize>(ck.header.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, m] : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("checkpoint: bad magic in " + path);
  if (detail::get_u32(in) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
  Checkpoint ck;
  ck.header.resize(detail::get_u32(in));
  in.read(ck.header.data(), static_cast<std::streamsize>(ck.header.size()));
  const auto count = detail::get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(detail::get_u32(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = detail::get_u32(in), cols = detail::get_u32(in);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw Error("checkpoint: truncated file");
    ck.tensors.emplace(std::move(name), std::move(m));
  }
  return ck;
}

/// Stores values (and optionally optimizer moments) under their names.
inline void store_parameters(Checkpoint& ck, const ParameterList& ps, bool with_moments = false) {
  for (const auto* p : ps) {
    ck.tensors[p->name] = p->value;
    if (with_moments) {
      ck.tensors["adam.m/" + p->name] = p->m;
      ck.tensors["adam.v/" + p->name] = p->v;
    }
  }
}

inline void restore_parameters(const Checkpoint& ck, const ParameterList& ps, bool with_moments = false) {
  for (auto* p : ps) {
    const auto& m = ck.at(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw Error("checkpoint: shape mismatch for '" + p->name + "'");
    p->value = m;
    p->grad.setZero(m.rows(), m.cols());
    if (with_moments) {
      p->m = ck.at("adam.m/" + p->name);
      p->v = ck.at("adam.v/" + p->name);
    } else {
      p->m.setZero(m.rows(), m.cols());
      p->v.setZero(m.rows(), m.cols());
    }
  }
}

}  // namespace groundkit
