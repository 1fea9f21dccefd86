#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "driftcast/common.hpp"
#include "driftcast/rng.hpp"

namespace driftcast {

// Parametric log-distance path-loss world with smooth correlated shadowing.
// A second short-correlation layer stands in for the small-scale variability
// a ray-traced channel would show. Immutable after construction; every query
// is pure.
struct RadioEnvironment {
  std::vector<Vec2> bs;          // base-station positions (m)
  double tx_power = 30.0;        // dBm
  double pl0 = 30.0;             // path loss at d0 = 1 m (dB)
  double pl_exp = 3.0;           // path-loss exponent n
  double shadow_sigma = 4.0;     // dB
  double shadow_corr = 50.0;     // value-noise grid pitch (m)
  double fast_sigma = 2.0;       // dB, small-scale layer
  double fast_corr = 4.0;        // m
  int n_beams = 16;
  uint64_t seed = 0;
  double min_dist = 1.0;         // distance clamp (m)
};

inline RadioEnvironment make_grid_env(int rows, int cols, double pitch, uint64_t seed,
                                      Vec2 origin = {200.0, 200.0}) {
  RadioEnvironment env;
  env.seed = seed;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      env.bs.push_back({origin.x + pitch * c, origin.y + pitch * r});
  return env;
}

namespace detail {

// Node value for the shadowing grid: mean 0, variance 1, bounded by ~3.5
// (sum of four hashed uniforms). Bounded tails keep the field's 1 m
// increments small relative to sigma.
inline double shadow_node(uint64_t seed, std::size_t bs_index, int64_t ix, int64_t iy) {
  uint64_t h = derive_seed(seed, {0x73686477ULL, bs_index, static_cast<uint64_t>(ix) * 0x9e3779b9ULL,
                                  static_cast<uint64_t>(iy)});
  double s = 0.0;
  for (int i = 0; i < 4; ++i) {
    h = splitmix64(h);
    s += static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  return (s - 2.0) * std::sqrt(3.0);
}

}  // namespace detail

namespace detail {

inline double value_noise(uint64_t seed, std::size_t bs_index, Vec2 p, double pitch) {
  const double gx = p.x / pitch;
  const double gy = p.y / pitch;
  const auto ix = static_cast<int64_t>(std::floor(gx));
  const auto iy = static_cast<int64_t>(std::floor(gy));
  const double fx = gx - static_cast<double>(ix);
  const double fy = gy - static_cast<double>(iy);
  const double v00 = shadow_node(seed, bs_index, ix, iy);
  const double v10 = shadow_node(seed, bs_index, ix + 1, iy);
  const double v01 = shadow_node(seed, bs_index, ix, iy + 1);
  const double v11 = shadow_node(seed, bs_index, ix + 1, iy + 1);
  const double v0 = v00 * (1.0 - fx) + v10 * fx;
  const double v1 = v01 * (1.0 - fx) + v11 * fx;
  return v0 * (1.0 - fy) + v1 * fy;
}

}  // namespace detail

// Sum of the slow shadowing layer and the small-scale layer, per BS.
inline double shadowing(const RadioEnvironment& env, std::size_t bs_index, Vec2 p) {
  double v = 0.0;
  if (env.shadow_sigma > 0.0)
    v += env.shadow_sigma * detail::value_noise(env.seed, bs_index, p, env.shadow_corr);
  if (env.fast_sigma > 0.0)
    v += env.fast_sigma *
         detail::value_noise(splitmix64(env.seed ^ 0x66617374ULL), bs_index, p, env.fast_corr);
  return v;
}

inline double rsrp(const RadioEnvironment& env, std::size_t bs_index, Vec2 p) {
  if (bs_index >= env.bs.size()) throw ContractError("rsrp: base station index out of range");
  const double d = std::max(dist(p, env.bs[bs_index]), env.min_dist);
  return env.tx_power - (env.pl0 + 10.0 * env.pl_exp * std::log10(d)) -
         shadowing(env, bs_index, p);
}

inline void rsrp_all(const RadioEnvironment& env, Vec2 p, std::vector<double>& out) {
  out.resize(env.bs.size());
  for (std::size_t b = 0; b < env.bs.size(); ++b) out[b] = rsrp(env, b, p);
}

// Strongest base station; ties go to the lowest index.
inline int serving_cell(const RadioEnvironment& env, Vec2 p) {
  if (env.bs.size() < 2) throw ContractError("RadioEnvironment: needs at least 2 base stations");
  int best = 0;
  double best_rsrp = rsrp(env, 0, p);
  for (std::size_t b = 1; b < env.bs.size(); ++b) {
    const double v = rsrp(env, b, p);
    if (v > best_rsrp) {
      best_rsrp = v;
      best = static_cast<int>(b);
    }
  }
  return best;
}

// Angular sector of the UE as seen from the BS. Sector 0 starts due west
// (angle -pi); due east maps to sector n_beams/2. Depends on angle only.
inline int beam_index(const RadioEnvironment& env, std::size_t bs_index, Vec2 p) {
  if (bs_index >= env.bs.size()) throw ContractError("beam_index: base station index out of range");
  const Vec2 d = p - env.bs[bs_index];
  const double ang = std::atan2(d.y, d.x);  // [-pi, pi]
  const double u = (ang + M_PI) / (2.0 * M_PI);
  const auto k = static_cast<int>(std::floor(u * env.n_beams));
  return ((k % env.n_beams) + env.n_beams) % env.n_beams;
}

// h_t = 1 iff the serving cell changed between t-1 and t. The first step of
// a trace has no label, so the output has size() - 1 entries.
inline std::vector<uint8_t> label_handover(std::span<const int> cells) {
  std::vector<uint8_t> labels;
  if (cells.size() < 2) return labels;
  labels.reserve(cells.size() - 1);
  for (std::size_t t = 1; t < cells.size(); ++t)
    labels.push_back(cells[t] != cells[t - 1] ? 1 : 0);
  return labels;
}

// Infer serving cells at the predicted positions and flag the transitions;
// tau=1 compares against the current serving cell.
inline std::vector<uint8_t> predicted_ho_from_traj(const RadioEnvironment& env,
                                                   std::span<const Vec2> pred_pos,
                                                   int current_cell) {
  std::vector<uint8_t> out;
  out.reserve(pred_pos.size());
  int prev = current_cell;
  for (const Vec2& p : pred_pos) {
    const int c = serving_cell(env, p);
    out.push_back(c != prev ? 1 : 0);
    prev = c;
  }
  return out;
}

struct A3Config {
  double hysteresis_db = 3.0;
  int ttt = 1;  // time-to-trigger, consecutive steps
};

struct A3Trace {
  std::vector<int> serving;       // executed serving cell per step
  std::vector<uint8_t> ho;        // 1 where a handover was executed
  std::vector<double> margin_db;  // best neighbor minus serving, per step
};

// A3-style heuristic: switch when the best neighbor beats the serving cell
// by the hysteresis for ttt consecutive steps. The margin trace doubles as a
// continuous score for ranking-based metrics.
inline A3Trace rsrp_threshold_heuristic(const RadioEnvironment& env,
                                        std::span<const Vec2> positions, const A3Config& cfg) {
  A3Trace out;
  if (positions.empty()) return out;
  std::vector<double> levels;
  int serving = serving_cell(env, positions.front());
  int streak = 0;
  for (const Vec2& p : positions) {
    rsrp_all(env, p, levels);
    int best_other = -1;
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < levels.size(); ++b) {
      if (static_cast<int>(b) == serving) continue;
      if (levels[b] > best_val) {
        best_val = levels[b];
        best_other = static_cast<int>(b);
      }
    }
    const double margin = best_val - levels[serving];
    bool fired = false;
    if (margin > cfg.hysteresis_db) {
      if (++streak >= cfg.ttt) {
        serving = best_other;
        streak = 0;
        fired = true;
      }
    } else {
      streak = 0;
    }
    out.serving.push_back(serving);
    out.ho.push_back(fired ? 1 : 0);
    out.margin_db.push_back(margin);
  }
  return out;
}

}  // namespace driftcast
