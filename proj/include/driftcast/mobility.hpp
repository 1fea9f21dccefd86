#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "driftcast/meta.hpp"
#include "driftcast/radio.hpp"

namespace driftcast {

struct DriftEvent {
  enum class Kind { SuddenTurn, SpeedShift };
  Kind kind = Kind::SuddenTurn;
  double time = 0.0;       // seconds (= step at 1 Hz)
  double magnitude = 0.0;  // turn: signed radians, |m| > pi/4; speed: factor
};

struct TrajectoryConfig {
  double duration = 240.0;     // seconds at 1 Hz
  double base_speed = 1.5;     // m/s
  double heading_noise = 0.1;  // rad per sqrt(s)
  double gps_noise = 0.5;      // m, added to reported positions
  double turn_bias = 0.0;      // rad per step, constant curvature
  double heading_pull = 0.0;   // mean-reversion rate toward preferred_heading
  double preferred_heading = 0.0;
  double init_heading = 0.0;
  Vec2 origin;
  std::vector<DriftEvent> drift;
  uint64_t seed = 0;
};

struct TrackPoint {
  double t = 0.0;
  Vec2 p;             // reported (noisy) position
  double speed = 0.0;  // commanded values, before gps noise
  double heading = 0.0;
};

inline void validate(const DriftEvent& e) {
  if (e.kind == DriftEvent::Kind::SuddenTurn) {
    if (!(std::abs(e.magnitude) > M_PI / 4.0))
      throw ContractError("DriftEvent: sudden turn must exceed 45 degrees");
  } else {
    if (!(e.magnitude > 0.0) || (e.magnitude > 0.5 && e.magnitude < 1.5))
      throw ContractError("DriftEvent: speed factor must be >= 1.5 or <= 0.5 (and > 0)");
  }
}

// Random-heading walk at 1 Hz. Drift events fire when t reaches their time,
// before that step's displacement, so the change shows up in the very next
// step. Deterministic per seed.
inline std::vector<TrackPoint> generate_trajectory(const TrajectoryConfig& cfg) {
  if (cfg.duration < 2.0) throw ContractError("TrajectoryConfig: duration too short");
  if (!(cfg.base_speed > 0.0)) throw ContractError("TrajectoryConfig: speed must be positive");
  for (const auto& e : cfg.drift) validate(e);

  Rng rng(derive_seed(cfg.seed, {0x74726a31ULL}));
  const auto n = static_cast<std::size_t>(cfg.duration);
  std::vector<TrackPoint> out;
  out.reserve(n);

  Vec2 pos = cfg.origin;
  double heading = cfg.init_heading;
  double speed = cfg.base_speed;
  for (std::size_t t = 0; t < n; ++t) {
    for (const auto& e : cfg.drift) {
      if (static_cast<std::size_t>(e.time) != t) continue;
      if (e.kind == DriftEvent::Kind::SuddenTurn)
        heading = wrap_angle(heading + e.magnitude);
      else
        speed *= e.magnitude;
    }
    TrackPoint pt;
    pt.t = static_cast<double>(t);
    pt.speed = speed;
    pt.heading = heading;
    pt.p = pos;
    if (cfg.gps_noise > 0.0) {
      pt.p.x += rng.normal(0.0, cfg.gps_noise);
      pt.p.y += rng.normal(0.0, cfg.gps_noise);
    }
    out.push_back(pt);
    pos = pos + Vec2{std::cos(heading), std::sin(heading)} * speed;
    double step = cfg.turn_bias;
    if (cfg.heading_pull > 0.0)
      step += cfg.heading_pull * wrap_angle(cfg.preferred_heading - heading);
    if (cfg.heading_noise > 0.0) step += rng.normal(0.0, cfg.heading_noise);
    heading = wrap_angle(heading + step);
  }
  return out;
}

struct Kinematics {
  std::vector<double> speed, heading;
};

namespace detail {

inline std::vector<double> median3(const std::vector<double>& v) {
  if (v.size() < 3) return v;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    // replicate-padded window
    const double a = v[i == 0 ? 0 : i - 1];
    const double b = v[i];
    const double c = v[i + 1 < v.size() ? i + 1 : v.size() - 1];
    out[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
  }
  return out;
}

}  // namespace detail

// Finite-difference speed and heading at 1 Hz; the first step copies the
// second; both channels pass through a 3-wide temporal median (heading is
// unwrapped first so the filter never straddles the -pi/pi seam).
inline Kinematics derive_kinematics(std::span<const Vec2> positions) {
  Kinematics k;
  const std::size_t n = positions.size();
  k.speed.assign(n, 0.0);
  k.heading.assign(n, 0.0);
  if (n < 2) return k;
  for (std::size_t t = 1; t < n; ++t) {
    const Vec2 d = positions[t] - positions[t - 1];
    k.speed[t] = norm(d);
    k.heading[t] = std::atan2(d.y, d.x);
  }
  k.speed[0] = k.speed[1];
  k.heading[0] = k.heading[1];

  std::vector<double> unwrapped(n);
  unwrapped[0] = k.heading[0];
  for (std::size_t t = 1; t < n; ++t)
    unwrapped[t] = unwrapped[t - 1] + wrap_angle(k.heading[t] - unwrapped[t - 1]);

  k.speed = detail::median3(k.speed);
  unwrapped = detail::median3(unwrapped);
  for (std::size_t t = 0; t < n; ++t) k.heading[t] = wrap_angle(unwrapped[t]);
  return k;
}

// ---------------------------------------------------------------------------
// GeoLife-format CSV ingestion: header `time,lat,lon`, ISO-8601 or epoch
// second timestamps. Traces are projected to local planar meters about the
// trace centroid, split at gaps > gap_split, speed-sanity-checked, and
// resampled to exactly 1 Hz by linear interpolation.
// ---------------------------------------------------------------------------

struct GeolifeOptions {
  double gap_split = 5.0;   // seconds
  double max_speed = 50.0;  // m/s; faster segments are dropped
};

struct IngestResult {
  std::vector<std::vector<TrackPoint>> tracks;
  std::vector<std::string> warnings;
};

namespace detail {

// days since 1970-01-01 (civil calendar)
inline int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

inline std::optional<double> parse_timestamp(const std::string& s) {
  bool ok = false;
  const double epoch = parse_double(s, ok);
  if (ok) return epoch;
  int y, mo, d, h, mi;
  double sec;
  char sep;
  if (std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%lf", &y, &mo, &d, &sep, &h, &mi, &sec) == 7 &&
      (sep == 'T' || sep == ' ')) {
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec >= 61.0)
      return std::nullopt;
    return static_cast<double>(days_from_civil(y, mo, d)) * 86400.0 + h * 3600.0 + mi * 60.0 +
           sec;
  }
  return std::nullopt;
}

}  // namespace detail

inline IngestResult ingest_geolife_csv(std::istream& in, const GeolifeOptions& opt = {},
                                       const std::string& origin = "<stream>") {
  IngestResult res;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    return ParseError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };

  if (!std::getline(in, line)) throw ParseError(origin + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "time,lat,lon") throw fail("expected header 'time,lat,lon'");

  struct Raw {
    double t, lat, lon;
  };
  std::vector<Raw> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos) throw fail("expected 3 comma-separated fields");
    const auto ts = detail::parse_timestamp(line.substr(0, c1));
    if (!ts) throw fail("bad timestamp '" + line.substr(0, c1) + "'");
    bool ok1 = false, ok2 = false;
    const double lat = parse_double(line.substr(c1 + 1, c2 - c1 - 1), ok1);
    const double lon = parse_double(line.substr(c2 + 1), ok2);
    if (!ok1 || !ok2) throw fail("bad coordinate");
    if (std::abs(lat) > 90.0 || std::abs(lon) > 180.0) throw fail("coordinate out of range");
    if (!rows.empty() && *ts <= rows.back().t) throw fail("timestamps must increase");
    rows.push_back({*ts, lat, lon});
  }
  if (rows.empty()) {
    res.warnings.push_back(origin + ": no data rows");
    return res;
  }

  // equirectangular projection about the trace centroid
  double lat0 = 0.0, lon0 = 0.0;
  for (const auto& r : rows) {
    lat0 += r.lat;
    lon0 += r.lon;
  }
  lat0 /= static_cast<double>(rows.size());
  lon0 /= static_cast<double>(rows.size());
  constexpr double kEarthRadius = 6371000.0;
  const double deg = M_PI / 180.0;
  const double cos_lat0 = std::cos(lat0 * deg);
  struct Pt {
    double t;
    Vec2 p;
  };
  std::vector<Pt> pts;
  pts.reserve(rows.size());
  for (const auto& r : rows)
    pts.push_back({r.t, {kEarthRadius * cos_lat0 * (r.lon - lon0) * deg,
                         kEarthRadius * (r.lat - lat0) * deg}});

  // split at gaps, drop too-fast segments, resample survivors
  std::size_t seg_start = 0;
  auto flush = [&](std::size_t lo, std::size_t hi) {  // [lo, hi)
    if (hi - lo < 2) return;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const double v = dist(pts[i].p, pts[i - 1].p) / (pts[i].t - pts[i - 1].t);
      if (v > opt.max_speed) {
        res.warnings.push_back(origin + ": dropped segment with speed " + format_double(v) +
                               " m/s");
        return;
      }
    }
    std::vector<TrackPoint> track;
    const double t0 = pts[lo].t;
    std::size_t j = lo;
    for (double t = t0; t <= pts[hi - 1].t + 1e-9; t += 1.0) {
      while (j + 1 < hi && pts[j + 1].t < t) ++j;
      TrackPoint tp;
      tp.t = t;
      if (t <= pts[j].t + 1e-9 || j + 1 >= hi) {
        tp.p = pts[j].p;
      } else {
        const double a = (t - pts[j].t) / (pts[j + 1].t - pts[j].t);
        tp.p = pts[j].p * (1.0 - a) + pts[j + 1].p * a;
      }
      track.push_back(tp);
    }
    if (track.size() < 2) return;
    std::vector<Vec2> positions;
    for (const auto& tp : track) positions.push_back(tp.p);
    const auto kin = derive_kinematics(positions);
    for (std::size_t i = 0; i < track.size(); ++i) {
      track[i].speed = kin.speed[i];
      track[i].heading = kin.heading[i];
    }
    res.tracks.push_back(std::move(track));
  };
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].t - pts[i - 1].t > opt.gap_split) {
      flush(seg_start, i);
      seg_start = i;
    }
  }
  flush(seg_start, pts.size());

  if (res.tracks.empty()) res.warnings.push_back(origin + ": no usable segments after filtering");
  return res;
}

inline IngestResult ingest_geolife_csv(const std::string& path, const GeolifeOptions& opt = {}) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open: " + path);
  return ingest_geolife_csv(f, opt, path);
}

// ---------------------------------------------------------------------------
// Observations, samples, tasks, splits
// ---------------------------------------------------------------------------

// Attach radio features: serving cell by strongest RSRP, that cell's beam
// sector, plus finite-difference kinematics from the reported positions.
inline std::vector<Observation> make_observations(std::span<const TrackPoint> track,
                                                  const RadioEnvironment& env) {
  std::vector<Vec2> positions;
  positions.reserve(track.size());
  for (const auto& tp : track) positions.push_back(tp.p);
  const auto kin = derive_kinematics(positions);

  std::vector<Observation> obs;
  obs.reserve(track.size());
  std::vector<double> levels;
  for (std::size_t i = 0; i < track.size(); ++i) {
    Observation o;
    o.t = track[i].t;
    o.p = track[i].p;
    o.speed = kin.speed[i];
    o.heading = kin.heading[i];
    rsrp_all(env, o.p, levels);
    o.cell = serving_cell(env, o.p);
    o.rsrp = levels[static_cast<std::size_t>(o.cell)];
    o.beam = beam_index(env, static_cast<std::size_t>(o.cell), o.p);
    obs.push_back(o);
  }
  return obs;
}

// Sliding windows at the given stride; targets are the next H positions and
// handover labels.
inline std::vector<Sample> make_samples(std::span<const Observation> obs, std::size_t k,
                                        std::size_t horizon, std::size_t stride = 1) {
  if (k < 2 || horizon < 1 || stride < 1) throw ContractError("make_samples: bad parameters");
  std::vector<Sample> out;
  if (obs.size() < k + horizon) return out;
  for (std::size_t start = 0; start + k + horizon <= obs.size(); start += stride) {
    Sample s;
    s.start = static_cast<int>(start);
    s.window.assign(obs.begin() + start, obs.begin() + start + k);
    for (std::size_t tau = 0; tau < horizon; ++tau) {
      const std::size_t t = start + k + tau;
      s.target_pos.push_back(obs[t].p);
      s.target_ho.push_back(obs[t].cell != obs[t - 1].cell ? 1 : 0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct Tile {
  int64_t ix = 0, iy = 0;
  Vec2 center;
  double extent = 500.0;
};

// Each sample goes to the tile holding the majority of its window positions;
// among tied tiles the last observation's tile wins when it is one of them,
// otherwise the smallest (ix, iy).
inline std::vector<Task> tile_tasks(std::span<const Sample> samples, double extent = 500.0) {
  if (!(extent > 0.0)) throw ContractError("tile_tasks: extent must be positive");
  auto tile_of = [extent](Vec2 p) {
    return std::pair<int64_t, int64_t>{static_cast<int64_t>(std::floor(p.x / extent)),
                                       static_cast<int64_t>(std::floor(p.y / extent))};
  };
  std::map<std::pair<int64_t, int64_t>, std::vector<Sample>> buckets;
  for (const Sample& s : samples) {
    std::map<std::pair<int64_t, int64_t>, int> counts;
    for (const auto& o : s.window) counts[tile_of(o.p)]++;
    int best = 0;
    for (const auto& [tile, c] : counts) best = std::max(best, c);
    const auto last_tile = tile_of(s.window.back().p);
    std::pair<int64_t, int64_t> chosen;
    if (counts[last_tile] == best) {
      chosen = last_tile;
    } else {
      for (const auto& [tile, c] : counts)
        if (c == best) {
          chosen = tile;
          break;  // map order = smallest (ix, iy)
        }
    }
    buckets[chosen].push_back(s);
  }
  std::vector<Task> tasks;
  int id = 0;
  for (auto& [tile, bucket] : buckets) {
    Task t;
    t.id = id++;
    t.name = "tile_" + std::to_string(tile.first) + "_" + std::to_string(tile.second);
    t.samples = std::move(bucket);
    for (auto& s : t.samples) s.task_id = t.id;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

// Lloyd's algorithm on window-centroid positions, k-means++ seeding, at most
// 100 iterations, stopping when assignments stabilize. Deterministic per seed.
inline std::vector<Task> kmeans_tasks(std::span<const Sample> samples, std::size_t k,
                                      uint64_t seed) {
  if (k < 1 || k > samples.size()) throw ContractError("kmeans_tasks: need 1 <= k <= n");
  std::vector<Vec2> feats;
  feats.reserve(samples.size());
  for (const Sample& s : samples) {
    Vec2 c{0, 0};
    for (const auto& o : s.window) c = c + o.p;
    feats.push_back(c * (1.0 / static_cast<double>(s.window.size())));
  }

  Rng rng(derive_seed(seed, {0x6b6d6e73ULL}));
  std::vector<Vec2> centers;
  centers.push_back(feats[rng.uniform_int(feats.size())]);
  std::vector<double> d2(feats.size());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec2& c : centers) {
        const Vec2 d = feats[i] - c;
        best = std::min(best, d.x * d.x + d.y * d.y);
      }
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) {
      centers.push_back(feats[rng.uniform_int(feats.size())]);
      continue;
    }
    double r = rng.uniform() * total;
    std::size_t pick = feats.size() - 1;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      r -= d2[i];
      if (r <= 0.0) {
        pick = i;
        break;
      }
    }
    centers.push_back(feats[pick]);
  }

  std::vector<int> assign(feats.size(), -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const Vec2 d = feats[i] - centers[c];
        const double dd = d.x * d.x + d.y * d.y;
        if (dd < best_d) {
          best_d = dd;
          best = static_cast<int>(c);
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<Vec2> sums(k, Vec2{0, 0});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      sums[assign[i]] = sums[assign[i]] + feats[i];
      counts[assign[i]]++;
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0) centers[c] = sums[c] * (1.0 / static_cast<double>(counts[c]));
  }

  std::vector<Task> tasks(k);
  for (std::size_t c = 0; c < k; ++c) {
    tasks[c].id = static_cast<int>(c);
    tasks[c].name = "km_" + std::to_string(c);
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample s = samples[i];
    s.task_id = assign[i];
    tasks[assign[i]].samples.push_back(std::move(s));
  }
  return tasks;
}

struct SplitSpec {
  double train = 0.6, val = 0.2, test = 0.2;
  uint64_t seed = 0;
};

struct TaskSplit {
  std::vector<int> train, val, test;
};

// Seeded shuffle of task ids, partitioned by the fractions. floor() for
// train and val; the remainder is test (10 tasks -> 6/2/2).
inline TaskSplit split_tasks(std::size_t n_tasks, const SplitSpec& spec) {
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ContractError("SplitSpec: fractions must sum to 1");
  std::vector<int> ids(n_tasks);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(spec.seed, {0x73706c74ULL}));
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const std::size_t j = i + rng.uniform_int(ids.size() - i);
    std::swap(ids[i], ids[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * n_tasks));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val * n_tasks));
  TaskSplit out;
  out.train.assign(ids.begin(), ids.begin() + n_train);
  out.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  out.test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace driftcast
