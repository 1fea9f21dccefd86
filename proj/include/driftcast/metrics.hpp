#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "driftcast/common.hpp"

namespace driftcast {

inline double ade(std::span<const Vec2> pred, std::span<const Vec2> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ContractError("ade: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += dist(pred[i], truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double fde(std::span<const Vec2> pred, std::span<const Vec2> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ContractError("fde: length mismatch");
  return dist(pred.back(), truth.back());
}

// One scored binary prediction.
struct HoOutcome {
  uint8_t label = 0;
  double score = 0.0;  // probability or any monotone score
};

struct ClassificationMetrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  bool precision_defined = true, recall_defined = true;
  long tp = 0, fp = 0, tn = 0, fn = 0;
};

inline ClassificationMetrics classification_metrics(std::span<const HoOutcome> outcomes,
                                                    double threshold = 0.5) {
  ClassificationMetrics m;
  for (const auto& o : outcomes) {
    const bool pred = o.score >= threshold;
    if (pred && o.label) ++m.tp;
    else if (pred && !o.label) ++m.fp;
    else if (!pred && o.label) ++m.fn;
    else ++m.tn;
  }
  const long n = m.tp + m.fp + m.tn + m.fn;
  m.accuracy = n > 0 ? static_cast<double>(m.tp + m.tn) / n : 0.0;
  if (m.tp + m.fp > 0) m.precision = static_cast<double>(m.tp) / (m.tp + m.fp);
  else m.precision_defined = false;
  if (m.tp + m.fn > 0) m.recall = static_cast<double>(m.tp) / (m.tp + m.fn);
  else m.recall_defined = false;
  if (m.precision + m.recall > 0.0)
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

// Mann-Whitney U via average ranks: P(score_pos > score_neg) + 1/2 P(equal).
// Returns 0.5 with defined=false when one class is absent.
inline double auroc(std::span<const HoOutcome> outcomes, bool* defined = nullptr) {
  std::vector<std::size_t> order(outcomes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return outcomes[a].score < outcomes[b].score;
  });
  double pos_rank_sum = 0.0;
  long n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && outcomes[order[j]].score == outcomes[order[i]].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average
    for (std::size_t k = i; k < j; ++k)
      if (outcomes[order[k]].label) pos_rank_sum += avg_rank;
    i = j;
  }
  for (const auto& o : outcomes) (o.label ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) {
    if (defined) *defined = false;
    return 0.5;
  }
  if (defined) *defined = true;
  const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// An HO A->B is a ping-pong when a return HO B->A happens within t_pp steps.
// Rate over all HOs in the sequence; 0 with defined=false when there are none.
inline double ping_pong_rate(std::span<const int> cells, int t_pp = 3, bool* defined = nullptr) {
  struct Ho {
    std::size_t step;
    int from, to;
  };
  std::vector<Ho> hos;
  for (std::size_t t = 1; t < cells.size(); ++t)
    if (cells[t] != cells[t - 1]) hos.push_back({t, cells[t - 1], cells[t]});
  if (hos.empty()) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  long pp = 0;
  for (std::size_t i = 0; i < hos.size(); ++i) {
    for (std::size_t j = i + 1; j < hos.size(); ++j) {
      if (hos[j].step - hos[i].step > static_cast<std::size_t>(t_pp)) break;
      if (hos[j].from == hos[i].to && hos[j].to == hos[i].from) {
        ++pp;
        break;
      }
    }
  }
  return static_cast<double>(pp) / static_cast<double>(hos.size());
}

// Count predicted HO events within +/- tolerance of consecutive predicted
// HO events; identity-free ping-pong proxy for classifiers without cells.
inline double ping_pong_rate_events(std::span<const int> ho_steps, int t_pp = 3,
                                    bool* defined = nullptr) {
  if (ho_steps.empty()) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  long pp = 0;
  for (std::size_t i = 0; i + 1 < ho_steps.size(); ++i)
    if (ho_steps[i + 1] - ho_steps[i] <= t_pp) ++pp;
  return static_cast<double>(pp) / static_cast<double>(ho_steps.size());
}

// Greedy one-to-one matching of true HOs to the nearest unmatched predicted
// HO within +/- tolerance steps; the unmatched fraction is the missed rate.
inline double missed_ho_rate(std::span<const int> true_steps, std::span<const int> pred_steps,
                             int tolerance = 1, bool* defined = nullptr) {
  if (true_steps.empty()) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  std::vector<bool> used(pred_steps.size(), false);
  long missed = 0;
  for (int t : true_steps) {
    int best = -1;
    int best_gap = tolerance + 1;
    for (std::size_t j = 0; j < pred_steps.size(); ++j) {
      if (used[j]) continue;
      const int gap = std::abs(pred_steps[j] - t);
      if (gap < best_gap) {
        best_gap = gap;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_gap <= tolerance) used[best] = true;
    else ++missed;
  }
  return static_cast<double>(missed) / static_cast<double>(true_steps.size());
}

struct RecoveryConfig {
  std::size_t pre_window = 20;   // steps before the drift for the baseline
  std::size_t rolling = 5;       // forward-looking rolling window
  double factor = 1.25;          // recovered when rolling ADE <= factor * baseline
};

// Steps until the rolling ADE returns within factor * pre-drift baseline.
// The rolling window looks forward from the candidate step so pre-drift
// values cannot mask the spike. nullopt = never recovered.
inline std::optional<int> recovery_time(std::span<const double> ade_trace, std::size_t drift_step,
                                        const RecoveryConfig& cfg = {}) {
  if (drift_step >= ade_trace.size() || drift_step == 0)
    throw ContractError("recovery_time: drift step out of range");
  const std::size_t lo = drift_step > cfg.pre_window ? drift_step - cfg.pre_window : 0;
  double baseline = 0.0;
  for (std::size_t i = lo; i < drift_step; ++i) baseline += ade_trace[i];
  baseline /= static_cast<double>(drift_step - lo);

  for (std::size_t t = drift_step; t < ade_trace.size(); ++t) {
    const std::size_t hi = std::min(ade_trace.size(), t + cfg.rolling);
    double rolling = 0.0;
    for (std::size_t i = t; i < hi; ++i) rolling += ade_trace[i];
    rolling /= static_cast<double>(hi - t);
    if (rolling <= cfg.factor * baseline) return static_cast<int>(t - drift_step);
  }
  return std::nullopt;
}

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct SeedAggregate {
  std::map<std::string, Aggregate> metrics;
  bool single_seed = false;
};

// Mean +/- population standard deviation per metric key across seeds.
inline SeedAggregate aggregate_seeds(std::span<const std::map<std::string, double>> reports) {
  if (reports.empty()) throw ContractError("aggregate_seeds: no reports");
  SeedAggregate out;
  out.single_seed = reports.size() == 1;
  for (const auto& [key, first_value] : reports.front()) {
    double mean = 0.0;
    for (const auto& r : reports) {
      const auto it = r.find(key);
      if (it == r.end()) throw ContractError("aggregate_seeds: missing key '" + key + "'");
      mean += it->second;
    }
    mean /= static_cast<double>(reports.size());
    double var = 0.0;
    for (const auto& r : reports) {
      const double d = r.at(key) - mean;
      var += d * d;
    }
    var /= static_cast<double>(reports.size());
    out.metrics[key] = {mean, std::sqrt(var)};
  }
  return out;
}

}  // namespace driftcast
