#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "driftcast/param_vector.hpp"
#include "driftcast/rng.hpp"

namespace driftcast {

// Row-major matrix view over flat storage.
struct Mat {
  double* data = nullptr;
  std::size_t rows = 0, cols = 0;
  double& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) const { return {data + r * cols, cols}; }
};

struct ConstMat {
  const double* data = nullptr;
  std::size_t rows = 0, cols = 0;
  ConstMat() = default;
  ConstMat(const Mat& m) : data(m.data), rows(m.rows), cols(m.cols) {}
  ConstMat(const double* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data + r * cols, cols}; }
};

// y += W x
inline void matvec_acc(ConstMat w, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = w.data + r * w.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) s += row[c] * x[c];
    y[r] += s;
  }
}

// y += W^T x  (looped over rows so memory access stays contiguous)
inline void matvec_t_acc(ConstMat w, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = w.data + r * w.cols;
    const double xr = x[r];
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += xr * row[c];
  }
}

// W += a b^T
inline void outer_acc(Mat w, std::span<const double> a, std::span<const double> b) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    double* row = w.data + r * w.cols;
    const double ar = a[r];
    for (std::size_t c = 0; c < w.cols; ++c) row[c] += ar * b[c];
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class Activation { Tanh, Relu, Identity };

inline double apply_act(Activation a, double x) {
  switch (a) {
    case Activation::Tanh: return std::tanh(x);
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Identity: return x;
  }
  return x;
}

// Derivative expressed through the activation output.
inline double act_grad_from_output(Activation a, double y) {
  switch (a) {
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// GRU cell
//
//   z_g = sigmoid(W_z x + U_z h + b_z)
//   r_g = sigmoid(W_r x + U_r h + b_r)
//   hh  = tanh(W_h x + U_h (r_g . h) + b_h)
//   h'  = (1 - z_g) . h + z_g . hh
// ---------------------------------------------------------------------------

struct GruDims {
  std::size_t input = 0, hidden = 0;
};

// Parameter slices bound to flat storage; W_* are hidden x input,
// U_* hidden x hidden, b_* hidden.
template <typename MatT, typename SpanT>
struct GruRefs {
  MatT wz, wr, wh, uz, ur, uh;
  SpanT bz, br, bh;
};
using GruParams = GruRefs<ConstMat, std::span<const double>>;
using GruGrads = GruRefs<Mat, std::span<double>>;

struct GruStepCache {
  std::vector<double> input, h_prev, z_gate, r_gate, h_hat, h_next;
};

inline void gru_forward(const GruParams& p, const GruDims& d, std::span<const double> x,
                        std::span<const double> h_prev, GruStepCache& cache) {
  if (x.size() != d.input || h_prev.size() != d.hidden)
    throw ContractError("gru_forward: dimension mismatch");
  const std::size_t n = d.hidden;
  cache.input.assign(x.begin(), x.end());
  cache.h_prev.assign(h_prev.begin(), h_prev.end());
  cache.z_gate.assign(p.bz.begin(), p.bz.end());
  cache.r_gate.assign(p.br.begin(), p.br.end());
  cache.h_hat.assign(p.bh.begin(), p.bh.end());
  cache.h_next.assign(n, 0.0);

  matvec_acc(p.wz, x, cache.z_gate);
  matvec_acc(p.uz, h_prev, cache.z_gate);
  matvec_acc(p.wr, x, cache.r_gate);
  matvec_acc(p.ur, h_prev, cache.r_gate);
  for (std::size_t i = 0; i < n; ++i) {
    cache.z_gate[i] = sigmoid(cache.z_gate[i]);
    cache.r_gate[i] = sigmoid(cache.r_gate[i]);
  }

  std::vector<double> rh(n);
  for (std::size_t i = 0; i < n; ++i) rh[i] = cache.r_gate[i] * h_prev[i];
  matvec_acc(p.wh, x, cache.h_hat);
  matvec_acc(p.uh, rh, cache.h_hat);
  for (std::size_t i = 0; i < n; ++i) {
    cache.h_hat[i] = std::tanh(cache.h_hat[i]);
    cache.h_next[i] = (1.0 - cache.z_gate[i]) * h_prev[i] + cache.z_gate[i] * cache.h_hat[i];
  }
}

// Exact partials of h_next chained with grad_h_next. Parameter gradients
// accumulate into `g`; grad_x and grad_h_prev accumulate too, so callers
// zero them (or chain across timesteps).
inline void gru_backward(const GruParams& p, const GruDims& d, const GruStepCache& c,
                         std::span<const double> grad_h_next, const GruGrads& g,
                         std::span<double> grad_x, std::span<double> grad_h_prev) {
  const std::size_t n = d.hidden;
  if (grad_h_next.size() != n || grad_x.size() != d.input || grad_h_prev.size() != n)
    throw ContractError("gru_backward: dimension mismatch");

  std::vector<double> da_h(n), da_z(n), da_r(n), q(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = grad_h_next[i];
    da_h[i] = gi * c.z_gate[i] * (1.0 - c.h_hat[i] * c.h_hat[i]);
    da_z[i] = gi * (c.h_hat[i] - c.h_prev[i]) * c.z_gate[i] * (1.0 - c.z_gate[i]);
    grad_h_prev[i] += gi * (1.0 - c.z_gate[i]);
  }

  // candidate path: q = U_h^T da_h feeds both the reset gate and h_prev
  matvec_t_acc(p.uh, da_h, q);
  for (std::size_t i = 0; i < n; ++i) {
    da_r[i] = q[i] * c.h_prev[i] * c.r_gate[i] * (1.0 - c.r_gate[i]);
    grad_h_prev[i] += q[i] * c.r_gate[i];
  }

  std::vector<double> rh(n);
  for (std::size_t i = 0; i < n; ++i) rh[i] = c.r_gate[i] * c.h_prev[i];
  outer_acc(g.wh, da_h, c.input);
  outer_acc(g.uh, da_h, rh);
  outer_acc(g.wz, da_z, c.input);
  outer_acc(g.uz, da_z, c.h_prev);
  outer_acc(g.wr, da_r, c.input);
  outer_acc(g.ur, da_r, c.h_prev);
  for (std::size_t i = 0; i < n; ++i) {
    g.bh[i] += da_h[i];
    g.bz[i] += da_z[i];
    g.br[i] += da_r[i];
  }

  matvec_t_acc(p.wh, da_h, grad_x);
  matvec_t_acc(p.wz, da_z, grad_x);
  matvec_t_acc(p.wr, da_r, grad_x);
  matvec_t_acc(p.uz, da_z, grad_h_prev);
  matvec_t_acc(p.ur, da_r, grad_h_prev);
}

// ---------------------------------------------------------------------------
// MLP: affine + activation chain. Final layer is identity by construction.
// ---------------------------------------------------------------------------

struct MlpSpec {
  std::vector<std::size_t> dims;        // input, hidden..., output
  std::vector<Activation> activations;  // one per layer; last Identity

  std::size_t layer_count() const { return activations.size(); }
  std::size_t in_dim() const { return dims.front(); }
  std::size_t out_dim() const { return dims.back(); }
};

template <typename MatT, typename SpanT>
struct MlpRefs {
  std::vector<MatT> w;
  std::vector<SpanT> b;
};
using MlpParams = MlpRefs<ConstMat, std::span<const double>>;
using MlpGrads = MlpRefs<Mat, std::span<double>>;

struct MlpCache {
  std::vector<std::vector<double>> outputs;  // outputs[0] = input, outputs[l+1] = layer l output
};

inline std::span<const double> mlp_forward(const MlpParams& p, const MlpSpec& spec,
                                           std::span<const double> x, MlpCache& cache) {
  if (x.size() != spec.in_dim()) throw ContractError("mlp_forward: input dimension mismatch");
  cache.outputs.assign(1, std::vector<double>(x.begin(), x.end()));
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    std::vector<double> y(p.b[l].begin(), p.b[l].end());
    matvec_acc(p.w[l], cache.outputs.back(), y);
    for (double& v : y) v = apply_act(spec.activations[l], v);
    cache.outputs.push_back(std::move(y));
  }
  return cache.outputs.back();
}

inline void mlp_backward(const MlpParams& p, const MlpSpec& spec, const MlpCache& cache,
                         std::span<const double> grad_y, const MlpGrads& g,
                         std::span<double> grad_x) {
  if (grad_y.size() != spec.out_dim()) throw ContractError("mlp_backward: grad dimension mismatch");
  std::vector<double> d(grad_y.begin(), grad_y.end());
  for (std::size_t l = spec.layer_count(); l-- > 0;) {
    const auto& out = cache.outputs[l + 1];
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] *= act_grad_from_output(spec.activations[l], out[i]);
    outer_acc(g.w[l], d, cache.outputs[l]);
    for (std::size_t i = 0; i < d.size(); ++i) g.b[l][i] += d[i];
    if (l > 0) {
      std::vector<double> prev(cache.outputs[l].size(), 0.0);
      matvec_t_acc(p.w[l], d, prev);
      d = std::move(prev);
    } else {
      matvec_t_acc(p.w[l], d, grad_x);
    }
  }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

inline ParamVector sgd_step(const ParamVector& theta, const GradVector& grad, double lr) {
  ParamVector out = theta;
  axpy(out, -lr, grad);
  return out;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamVector m, v;
  long step = 0;

  explicit AdamState(const ParamLayoutPtr& layout) : m(layout), v(layout) {}
};

inline void adam_step(AdamState& state, ParamVector& theta, const GradVector& grad,
                      const AdamConfig& cfg) {
  check_compatible(theta, grad);
  check_compatible(theta, state.m);
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double gi = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Weights ~ Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero. Fan-in is
// the second shape dimension; 1-D entries are biases. Draw order follows the
// layout, so a fixed seed gives a bitwise-identical vector.
inline ParamVector init_params(const ParamLayoutPtr& layout, uint64_t seed) {
  ParamVector theta(layout);
  Rng rng(derive_seed(seed, {0x696e6974ULL}));  // "init"
  for (std::size_t e = 0; e < layout->entry_count(); ++e) {
    const auto& entry = layout->entry(e);
    if (entry.shape.size() < 2) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(entry.shape[1]));
    auto s = theta.slice(e);
    for (double& v : s) v = rng.uniform(-bound, bound);
  }
  return theta;
}

}  // namespace driftcast
