#pragma once

#include <deque>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "driftcast/meta.hpp"
#include "driftcast/model.hpp"

namespace driftcast {

inline double residual(Vec2 p_true, Vec2 p_pred_1step) { return dist(p_true, p_pred_1step); }

struct DetectorParams {
  double lambda = 0.2;       // EWMA decay
  double gamma = 2.0;        // trigger threshold in ring std-devs
  std::size_t window = 100;  // residual ring size W
  std::size_t warmup_min = 20;
  int cooldown = 10;  // steps blocked after a trigger
};

struct DetectorUpdate {
  bool triggered = false;
  double s = 0.0, mu = 0.0, sigma = 0.0;
};

// EWMA of one-step residuals compared against rolling ring statistics.
// mu/sigma are computed over the ring BEFORE the new residual is appended,
// so an outlier cannot inflate its own threshold; sigma is the population
// standard deviation; the trigger inequality is strict.
class EwmaDetector {
 public:
  explicit EwmaDetector(DetectorParams params = {}) : p_(params) {}

  const DetectorParams& params() const { return p_; }
  double ewma() const { return s_; }
  std::size_t ring_size() const { return ring_.size(); }
  int cooldown_remaining() const { return cooldown_remaining_; }

  DetectorUpdate update(double r) {
    if (!(r >= 0.0)) throw ContractError("EwmaDetector: residual must be >= 0");
    DetectorUpdate out;
    double mu = 0.0, var = 0.0;
    if (!ring_.empty()) {
      for (double v : ring_) mu += v;
      mu /= static_cast<double>(ring_.size());
      for (double v : ring_) var += (v - mu) * (v - mu);
      var /= static_cast<double>(ring_.size());
    }
    const double sigma = std::sqrt(var);

    s_ = p_.lambda * r + (1.0 - p_.lambda) * s_;
    out.s = s_;
    out.mu = mu;
    out.sigma = sigma;
    out.triggered = ring_.size() >= p_.warmup_min && cooldown_remaining_ == 0 &&
                    s_ > mu + p_.gamma * sigma;

    ring_.push_back(r);
    if (ring_.size() > p_.window) ring_.pop_front();

    if (out.triggered)
      cooldown_remaining_ = p_.cooldown;
    else if (cooldown_remaining_ > 0)
      --cooldown_remaining_;
    return out;
  }

 private:
  DetectorParams p_;
  double s_ = 0.0;
  std::deque<double> ring_;
  int cooldown_remaining_ = 0;
};

struct AdaptConfig {
  std::size_t n_adapt = 10;   // buffer size
  int steps = 5;              // K
  double lr = 1e-3;           // eta
  double lambda_reg = 1e-4;   // pull toward theta_star
  int cooldown = 10;          // detector cooldown after a trigger
};

// K full-batch SGD steps on the buffer loss plus the proximal term
// lambda_reg * ||theta - theta_star||^2.
inline ParamVector compact_adapt(const Forecaster& model, const ParamVector& theta,
                                 const ParamVector& theta_star,
                                 std::span<const Sample* const> buffer, const AdaptConfig& cfg) {
  if (buffer.empty()) throw ContractError("compact_adapt: empty buffer");
  check_compatible(theta, theta_star);
  ParamVector cur = theta;
  GradVector grad(model.layout());
  for (int k = 0; k < cfg.steps; ++k) {
    model.grad_joint_batch(cur, buffer, grad);
    // + 2 * lambda_reg * (theta - theta_star)
    axpy(grad, 2.0 * cfg.lambda_reg, cur);
    axpy(grad, -2.0 * cfg.lambda_reg, theta_star);
    axpy(cur, -cfg.lr, grad);
  }
  return cur;
}

enum class AdaptMode {
  None,           // frozen model, pure evaluation
  EwmaTriggered,  // detector decides
  Always,         // one (or more) update every step once the buffer is full
};

struct StreamOptions {
  AdaptMode mode = AdaptMode::EwmaTriggered;
  DetectorParams detector;
  AdaptConfig adapt;
  // Always mode: per-tick step count and rate; no regularizer.
  int always_steps = 1;
  double always_lr = 1e-3;
};

struct StepRecord {
  int step = 0;
  std::vector<Vec2> pred;        // H predicted positions
  std::vector<double> ho_prob;   // sigmoid of the H logits
  double residual = 0.0;         // NaN before the first ground truth arrives
  double s = 0.0, mu = 0.0, sigma = 0.0;
  bool triggered = false;
  double ade = 0.0;  // against this sample's targets
};

struct StreamEvent {
  int step = 0;
  std::string kind;
};

struct StreamResult {
  std::vector<StepRecord> trace;
  std::vector<StreamEvent> events;
  ParamVector theta_final;
};

// Online deployment over a contiguous 1 Hz stream of samples (stride 1).
// Per step: predict with the current theta, then score the 1-step-ahead
// prediction made at the previous step against the newly observed position,
// update the detector, and adapt when the policy says so. Adaptation only
// ever sees samples whose full H-step targets are already observed.
inline StreamResult run_stream(const Forecaster& model, const ParamVector& theta_star,
                               std::span<const Sample> stream, const StreamOptions& opt) {
  const auto& cfg = model.config();
  if (stream.size() < cfg.k + cfg.horizon)
    throw ContractError("run_stream: stream shorter than k+H");

  DetectorParams det = opt.detector;
  det.cooldown = opt.adapt.cooldown;
  EwmaDetector detector(det);

  StreamResult res{{}, {}, theta_star};
  res.trace.reserve(stream.size());
  std::optional<Vec2> pending_1step;

  for (std::size_t t = 0; t < stream.size(); ++t) {
    const Sample& sample = stream[t];
    StepRecord rec;
    rec.step = static_cast<int>(t);

    auto out = model.forward(res.theta_final, sample.window);
    rec.pred = out.pred_pos;
    rec.ho_prob.resize(cfg.horizon);
    for (std::size_t tau = 0; tau < cfg.horizon; ++tau)
      rec.ho_prob[tau] = sigmoid(out.ho_logits[tau]);
    rec.ade = 0.0;
    for (std::size_t tau = 0; tau < cfg.horizon; ++tau)
      rec.ade += dist(out.pred_pos[tau], sample.target_pos[tau]);
    rec.ade /= static_cast<double>(cfg.horizon);

    bool want_adapt = false;
    if (pending_1step) {
      rec.residual = residual(sample.window.back().p, *pending_1step);
      const auto upd = detector.update(rec.residual);
      rec.s = upd.s;
      rec.mu = upd.mu;
      rec.sigma = upd.sigma;
      rec.triggered = upd.triggered;
      want_adapt = (opt.mode == AdaptMode::EwmaTriggered) && upd.triggered;
    } else {
      rec.residual = std::numeric_limits<double>::quiet_NaN();
    }
    pending_1step = out.pred_pos.front();

    // samples up to t-H have all H targets observed by now
    const std::ptrdiff_t labeled_end = static_cast<std::ptrdiff_t>(t) -
                                       static_cast<std::ptrdiff_t>(cfg.horizon) + 1;
    const std::size_t labeled = labeled_end > 0 ? static_cast<std::size_t>(labeled_end) : 0;

    if (opt.mode == AdaptMode::Always && labeled >= opt.adapt.n_adapt) {
      const std::size_t lo = labeled - opt.adapt.n_adapt;
      SampleRefs buffer;
      for (std::size_t i = lo; i < labeled; ++i) buffer.push_back(&stream[i]);
      AdaptConfig acfg = opt.adapt;
      acfg.steps = opt.always_steps;
      acfg.lr = opt.always_lr;
      acfg.lambda_reg = 0.0;
      res.theta_final = compact_adapt(model, res.theta_final, theta_star, buffer, acfg);
      res.events.push_back({rec.step, "adapt"});
    } else if (want_adapt && labeled > 0) {
      const std::size_t lo = labeled > opt.adapt.n_adapt ? labeled - opt.adapt.n_adapt : 0;
      SampleRefs buffer;
      for (std::size_t i = lo; i < labeled; ++i) buffer.push_back(&stream[i]);
      res.theta_final = compact_adapt(model, res.theta_final, theta_star, buffer, opt.adapt);
      res.events.push_back({rec.step, "adapt"});
    }

    res.trace.push_back(std::move(rec));
  }
  return res;
}

// Per-step trace as CSV: step, pred_x/y per tau, residual, s, mu, sigma,
// triggered, ho_prob per tau.
inline std::string trace_to_csv(const StreamResult& res, std::size_t horizon) {
  std::ostringstream os;
  os << "step";
  for (std::size_t tau = 1; tau <= horizon; ++tau) os << ",pred_x_" << tau << ",pred_y_" << tau;
  os << ",residual,s,mu,sigma,triggered";
  for (std::size_t tau = 1; tau <= horizon; ++tau) os << ",ho_prob_" << tau;
  os << '\n';
  for (const auto& r : res.trace) {
    os << r.step;
    for (const auto& p : r.pred) os << ',' << format_double(p.x) << ',' << format_double(p.y);
    os << ',' << format_double(r.residual) << ',' << format_double(r.s) << ','
       << format_double(r.mu) << ',' << format_double(r.sigma) << ',' << (r.triggered ? 1 : 0);
    for (double h : r.ho_prob) os << ',' << format_double(h);
    os << '\n';
  }
  return os.str();
}

}  // namespace driftcast
