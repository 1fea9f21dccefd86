#pragma once

#include <array>

#include "driftcast/drift.hpp"
#include "driftcast/model.hpp"

namespace driftcast {

// Constant-velocity extrapolation from the last two window positions.
inline std::vector<Vec2> cv_predict(std::span<const Observation> window, std::size_t horizon) {
  if (window.size() < 2) throw ContractError("cv_predict: window needs at least 2 points");
  const Vec2 p = window.back().p;
  const Vec2 v = p - window[window.size() - 2].p;  // dt = 1
  std::vector<Vec2> out;
  out.reserve(horizon);
  for (std::size_t tau = 1; tau <= horizon; ++tau)
    out.push_back(p + v * static_cast<double>(tau));
  return out;
}

struct KalmanConfig {
  double q = 0.1;  // process noise (m^2)
  double r = 1.0;  // measurement noise (m^2)
};

// Constant-velocity Kalman filter, state (x, y, vx, vy), position-only
// observations, dt = 1. Velocity is initialized by two-point differencing,
// the textbook exact start for noiseless tracks.
class KalmanFilter {
 public:
  explicit KalmanFilter(KalmanConfig cfg = {}) : cfg_(cfg) {}

  bool initialized() const { return stage_ == 2; }
  const std::array<double, 4>& state() const { return x_; }
  const std::array<double, 16>& covariance() const { return p_; }

  void observe(Vec2 z) {
    if (!std::isfinite(z.x) || !std::isfinite(z.y))
      throw ContractError("KalmanFilter: non-finite observation");
    if (stage_ == 0) {
      first_ = z;
      stage_ = 1;
      return;
    }
    if (stage_ == 1) {
      x_ = {z.x, z.y, z.x - first_.x, z.y - first_.y};
      p_.fill(0.0);
      // per axis: pos var r, vel var 2r, cross-cov r
      at(p_, 0, 0) = cfg_.r;
      at(p_, 1, 1) = cfg_.r;
      at(p_, 2, 2) = 2.0 * cfg_.r;
      at(p_, 3, 3) = 2.0 * cfg_.r;
      at(p_, 0, 2) = at(p_, 2, 0) = cfg_.r;
      at(p_, 1, 3) = at(p_, 3, 1) = cfg_.r;
      stage_ = 2;
      return;
    }
    predict_once();
    update(z);
  }

  // Horizon positions by propagating the transition with no updates.
  std::vector<Vec2> predict(std::size_t horizon) const {
    if (stage_ != 2) throw ContractError("KalmanFilter: predict before initialization");
    std::vector<Vec2> out;
    out.reserve(horizon);
    for (std::size_t tau = 1; tau <= horizon; ++tau) {
      const auto t = static_cast<double>(tau);
      out.push_back({x_[0] + t * x_[2], x_[1] + t * x_[3]});
    }
    return out;
  }

 private:
  static double& at(std::array<double, 16>& m, int r, int c) { return m[r * 4 + c]; }
  static double get(const std::array<double, 16>& m, int r, int c) { return m[r * 4 + c]; }

  void predict_once() {
    // x = F x
    x_[0] += x_[2];
    x_[1] += x_[3];
    // P = F P F^T + Q
    std::array<double, 16> fp{};
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double v = get(p_, r, c);
        if (r == 0) v += get(p_, 2, c);
        if (r == 1) v += get(p_, 3, c);
        at(fp, r, c) = v;
      }
    std::array<double, 16> fpf{};
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double v = get(fp, r, c);
        if (c == 0) v += get(fp, r, 2);
        if (c == 1) v += get(fp, r, 3);
        at(fpf, r, c) = v;
      }
    p_ = fpf;
    const double q = cfg_.q;
    at(p_, 0, 0) += q / 4.0;
    at(p_, 1, 1) += q / 4.0;
    at(p_, 2, 2) += q;
    at(p_, 3, 3) += q;
    at(p_, 0, 2) += q / 2.0;
    at(p_, 2, 0) += q / 2.0;
    at(p_, 1, 3) += q / 2.0;
    at(p_, 3, 1) += q / 2.0;
  }

  void update(Vec2 z) {
    const double y0 = z.x - x_[0];
    const double y1 = z.y - x_[1];
    const double s00 = get(p_, 0, 0) + cfg_.r;
    const double s01 = get(p_, 0, 1);
    const double s10 = get(p_, 1, 0);
    const double s11 = get(p_, 1, 1) + cfg_.r;
    const double det = s00 * s11 - s01 * s10;
    const double i00 = s11 / det, i01 = -s01 / det, i10 = -s10 / det, i11 = s00 / det;

    double k[4][2];
    for (int r = 0; r < 4; ++r) {
      const double ph0 = get(p_, r, 0), ph1 = get(p_, r, 1);
      k[r][0] = ph0 * i00 + ph1 * i10;
      k[r][1] = ph0 * i01 + ph1 * i11;
    }
    for (int r = 0; r < 4; ++r) x_[r] += k[r][0] * y0 + k[r][1] * y1;

    // P = (I - K H) P, then symmetrize
    std::array<double, 16> np{};
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        at(np, r, c) = get(p_, r, c) - k[r][0] * get(p_, 0, c) - k[r][1] * get(p_, 1, c);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) at(p_, r, c) = 0.5 * (get(np, r, c) + get(np, c, r));
  }

  KalmanConfig cfg_;
  int stage_ = 0;
  Vec2 first_;
  std::array<double, 4> x_{};
  std::array<double, 16> p_{};
};

// Feed a sample window through a fresh filter and predict the horizon.
inline std::vector<Vec2> kf_predict_window(std::span<const Observation> window,
                                           std::size_t horizon, const KalmanConfig& cfg = {}) {
  if (window.size() < 2) throw ContractError("kf_predict_window: window needs at least 2 points");
  KalmanFilter kf(cfg);
  for (const auto& o : window) kf.observe(o.p);
  return kf.predict(horizon);
}

// Offline model updated on the most recent n samples at every step, no drift
// detection and no proximal term.
inline StreamResult sliding_window_finetune(const Forecaster& model, const ParamVector& theta0,
                                            std::span<const Sample> stream, std::size_t n,
                                            int steps_per_tick = 1, double lr = 1e-3) {
  StreamOptions opt;
  opt.mode = AdaptMode::Always;
  opt.adapt.n_adapt = n;
  opt.always_steps = steps_per_tick;
  opt.always_lr = lr;
  return run_stream(model, theta0, stream, opt);
}

}  // namespace driftcast
