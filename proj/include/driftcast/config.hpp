#pragma once

#include <fstream>
#include <type_traits>
#include <sstream>
#include <string>
#include <vector>

#include "driftcast/drift.hpp"
#include "driftcast/meta.hpp"
#include "driftcast/mobility.hpp"
#include "driftcast/model.hpp"
#include "driftcast/radio.hpp"

namespace driftcast {

// Every tunable in one flat key=value file ('#' starts a comment). Unknown
// keys are rejected on load; all keys carry the documented defaults.
struct ExperimentConfig {
  // model
  std::size_t k = 10;
  std::size_t horizon = 3;
  std::size_t hidden = 64;
  std::vector<std::size_t> head_layers{64, 64};
  double lambda_ho = 0.5;
  // feature scales. s_pos doubles as the trajectory-head output gain; 5 m
  // keeps plain SGD at the published inner/adapt rates stable, while the
  // library-level default of 100 m diverges there (see README).
  double s_pos = 5.0;
  double c_rsrp = -90.0;
  double s_rsrp = 20.0;
  double s_speed = 10.0;

  // meta-learning
  double inner_lr = 1e-2;
  int inner_steps = 5;
  double meta_step = 0.1;
  int meta_iterations = 1000;
  int meta_val_every = 25;
  int meta_val_select = 1;  // symmetric checkpoint selection vs the offline baseline
  int task_batch = 5;
  std::size_t support_size = 10;
  std::size_t query_size = 20;

  // offline baseline training (Adam on pooled train tasks)
  double offline_lr = 1e-3;
  int offline_epochs = 30;
  std::size_t offline_batch = 32;

  // online adaptation
  std::size_t n_adapt = 10;
  int adapt_steps = 5;
  double adapt_lr = 1e-3;
  double lambda_reg = 1e-4;
  int cooldown = 10;

  // drift detection
  double ewma_lambda = 0.2;
  double ewma_gamma = 2.0;
  std::size_t ewma_window = 100;
  std::size_t ewma_warmup = 20;

  // synthetic mobility
  std::size_t n_trajectories = 30;
  double traj_duration = 240.0;
  double speed_min = 1.0;
  double speed_max = 4.0;
  // per-trajectory motion regime: heading noise drawn uniformly per zone
  double heading_noise_min = 0.03;
  double heading_noise_max = 0.25;
  double gps_noise = 1.0;
  double turn_bias_scale = 0.1;
  double heading_pull = 0.08;  // mean-reversion toward a per-trajectory heading
  double area = 1200.0;
  std::size_t stride = 2;

  // task construction and splits
  std::string task_mode = "kmeans";  // kmeans | tiles
  double tile_extent = 500.0;
  std::size_t kmeans_k = 30;
  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;

  // radio layer
  int bs_rows = 3;
  int bs_cols = 3;
  double bs_pitch = 400.0;
  double tx_power = 30.0;
  double pl0 = 30.0;
  double pl_exp = 3.0;
  double shadow_sigma = 4.0;
  double shadow_corr = 50.0;
  double fast_sigma = 2.0;  // small-scale layer, stand-in for multipath
  double fast_corr = 4.0;
  int n_beams = 16;

  // drift scenarios
  std::size_t drift_streams = 6;
  double drift_duration = 300.0;
  double drift_time = 150.0;
  double turn_magnitude = M_PI / 2.0;
  double speed_factor = 2.0;

  // handover evaluation
  std::size_t ho_streams = 6;
  double ho_threshold = 0.5;
  int ping_pong_window = 3;
  int missed_tol = 1;
  double hysteresis_db = 3.0;
  int ttt = 1;

  // evaluation protocol
  std::vector<int> shots{1, 5, 10, 20};
  double recovery_factor = 1.25;
  std::size_t recovery_pre = 20;
  std::size_t recovery_roll = 5;
  int seeds = 5;
  uint64_t seed = 1;

  template <typename Visitor>
  void visit(Visitor&& v) {
    v("k", k);
    v("horizon", horizon);
    v("hidden", hidden);
    v("head_layers", head_layers);
    v("lambda_ho", lambda_ho);
    v("s_pos", s_pos);
    v("c_rsrp", c_rsrp);
    v("s_rsrp", s_rsrp);
    v("s_speed", s_speed);
    v("inner_lr", inner_lr);
    v("inner_steps", inner_steps);
    v("meta_step", meta_step);
    v("meta_iterations", meta_iterations);
    v("meta_val_every", meta_val_every);
    v("meta_val_select", meta_val_select);
    v("task_batch", task_batch);
    v("support_size", support_size);
    v("query_size", query_size);
    v("offline_lr", offline_lr);
    v("offline_epochs", offline_epochs);
    v("offline_batch", offline_batch);
    v("n_adapt", n_adapt);
    v("adapt_steps", adapt_steps);
    v("adapt_lr", adapt_lr);
    v("lambda_reg", lambda_reg);
    v("cooldown", cooldown);
    v("ewma_lambda", ewma_lambda);
    v("ewma_gamma", ewma_gamma);
    v("ewma_window", ewma_window);
    v("ewma_warmup", ewma_warmup);
    v("n_trajectories", n_trajectories);
    v("traj_duration", traj_duration);
    v("speed_min", speed_min);
    v("speed_max", speed_max);
    v("heading_noise_min", heading_noise_min);
    v("heading_noise_max", heading_noise_max);
    v("gps_noise", gps_noise);
    v("turn_bias_scale", turn_bias_scale);
    v("heading_pull", heading_pull);
    v("area", area);
    v("stride", stride);
    v("task_mode", task_mode);
    v("tile_extent", tile_extent);
    v("kmeans_k", kmeans_k);
    v("split_train", split_train);
    v("split_val", split_val);
    v("split_test", split_test);
    v("bs_rows", bs_rows);
    v("bs_cols", bs_cols);
    v("bs_pitch", bs_pitch);
    v("tx_power", tx_power);
    v("pl0", pl0);
    v("pl_exp", pl_exp);
    v("shadow_sigma", shadow_sigma);
    v("shadow_corr", shadow_corr);
    v("fast_sigma", fast_sigma);
    v("fast_corr", fast_corr);
    v("n_beams", n_beams);
    v("drift_streams", drift_streams);
    v("drift_duration", drift_duration);
    v("drift_time", drift_time);
    v("turn_magnitude", turn_magnitude);
    v("speed_factor", speed_factor);
    v("ho_streams", ho_streams);
    v("ho_threshold", ho_threshold);
    v("ping_pong_window", ping_pong_window);
    v("missed_tol", missed_tol);
    v("hysteresis_db", hysteresis_db);
    v("ttt", ttt);
    v("shots", shots);
    v("recovery_factor", recovery_factor);
    v("recovery_pre", recovery_pre);
    v("recovery_roll", recovery_roll);
    v("seeds", seeds);
    v("seed", seed);
  }

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw ParseError(std::string("config: ") + what);
    };
    req(k >= 2, "k must be >= 2");
    req(horizon >= 1, "horizon must be >= 1");
    req(hidden >= 1, "hidden must be >= 1");
    req(!head_layers.empty(), "head_layers must not be empty");
    req(s_pos > 0 && s_rsrp > 0 && s_speed > 0, "feature scales must be positive");
    req(inner_lr > 0 && meta_step > 0 && meta_step <= 1.0, "meta rates out of range");
    req(inner_steps >= 0 && meta_iterations >= 0 && task_batch >= 1, "meta counts out of range");
    req(support_size >= 1 && query_size >= 1, "episode sizes must be positive");
    req(offline_lr > 0 && offline_epochs >= 0 && offline_batch >= 1, "offline settings invalid");
    req(n_adapt >= 1 && adapt_steps >= 0 && adapt_lr > 0 && lambda_reg >= 0 && cooldown >= 0,
        "adaptation settings invalid");
    req(ewma_lambda > 0 && ewma_lambda <= 1.0 && ewma_gamma > 0 && ewma_window >= 1,
        "detector settings invalid");
    req(n_trajectories >= 1 && traj_duration >= static_cast<double>(k + horizon + 1),
        "trajectory settings invalid");
    req(speed_min > 0 && speed_max >= speed_min, "speed range invalid");
    req(gps_noise >= 0 && heading_noise_min >= 0 && heading_noise_max >= heading_noise_min &&
            turn_bias_scale >= 0,
        "noise scales invalid");
    req(heading_pull >= 0 && heading_pull < 1.0, "heading_pull out of range");
    req(stride >= 1, "stride must be >= 1");
    req(task_mode == "kmeans" || task_mode == "tiles", "task_mode must be kmeans or tiles");
    req(tile_extent > 0 && kmeans_k >= 1, "task construction invalid");
    req(std::abs(split_train + split_val + split_test - 1.0) < 1e-9,
        "split fractions must sum to 1");
    req(bs_rows >= 1 && bs_cols >= 1 && bs_rows * bs_cols >= 2, "need at least 2 base stations");
    req(pl_exp > 0, "path-loss exponent must be positive");
    req(shadow_sigma >= 0 && shadow_corr > 0 && fast_sigma >= 0 && fast_corr > 0,
        "shadowing settings invalid");
    req(n_beams >= 2, "n_beams must be >= 2");
    req(drift_streams >= 1 && ho_streams >= 1, "stream counts invalid");
    req(drift_time > static_cast<double>(k + horizon) + recovery_pre &&
            drift_time < drift_duration - 25.0,
        "drift_time must leave room before and after the event");
    req(std::abs(turn_magnitude) > M_PI / 4.0, "turn_magnitude must exceed 45 degrees");
    req(speed_factor >= 1.5 || speed_factor <= 0.5, "speed_factor must be >= 1.5 or <= 0.5");
    req(ho_threshold >= 0 && ho_threshold <= 1, "ho_threshold out of range");
    req(ping_pong_window >= 1 && missed_tol >= 0 && ttt >= 1, "HO metric settings invalid");
    req(!shots.empty(), "shots must not be empty");
    for (int s : shots) req(s >= 1, "shots must be >= 1");
    req(recovery_factor >= 1.0 && recovery_pre >= 1 && recovery_roll >= 1,
        "recovery settings invalid");
    req(seeds >= 1, "seeds must be >= 1");
  }

  static ExperimentConfig from_string(const std::string& text,
                                      const std::string& origin = "<config>") {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash_pos = line.find('#');
      if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
      // trim
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto e = line.find_last_not_of(" \t\r");
      line = line.substr(b, e - b + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(origin + ":" + std::to_string(line_no) + ": expected key=value");
      std::string key = line.substr(0, eq);
      std::string val = line.substr(eq + 1);
      while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
      const auto vb = val.find_first_not_of(" \t");
      val = vb == std::string::npos ? std::string() : val.substr(vb);

      bool found = false, ok = true;
      cfg.visit([&](const char* name, auto& field) {
        if (found || key != name) return;
        found = true;
        ok = parse_field(val, field);
      });
      if (!found)
        throw ParseError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
      if (!ok)
        throw ParseError(origin + ":" + std::to_string(line_no) + ": bad value for '" + key +
                         "'");
    }
    cfg.validate();
    return cfg;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str(), path);
  }

  // Canonical serialization (declaration order); the config hash binds
  // reports to the exact settings.
  std::string serialize() const {
    std::ostringstream os;
    const_cast<ExperimentConfig*>(this)->visit([&](const char* name, auto& field) {
      os << name << '=' << format_field(field) << '\n';
    });
    return os.str();
  }

  std::string hash_hex() const {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : serialize()) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.k = k;
    m.horizon = horizon;
    m.hidden = hidden;
    m.head_layers = head_layers;
    m.lambda_ho = lambda_ho;
    m.n_beams = n_beams;
    m.s_pos = s_pos;
    m.c_rsrp = c_rsrp;
    m.s_rsrp = s_rsrp;
    m.s_speed = s_speed;
    return m;
  }

  RadioEnvironment radio_env(uint64_t env_seed) const {
    auto env = make_grid_env(bs_rows, bs_cols, bs_pitch, env_seed);
    env.tx_power = tx_power;
    env.pl0 = pl0;
    env.pl_exp = pl_exp;
    env.shadow_sigma = shadow_sigma;
    env.shadow_corr = shadow_corr;
    env.fast_sigma = fast_sigma;
    env.fast_corr = fast_corr;
    env.n_beams = n_beams;
    return env;
  }

  MetaConfig meta(uint64_t meta_seed) const {
    MetaConfig mc;
    mc.inner_lr = inner_lr;
    mc.inner_steps = inner_steps;
    mc.meta_step = meta_step;
    mc.iterations = meta_iterations;
    mc.task_batch = task_batch;
    mc.support_size = support_size;
    mc.query_size = query_size;
    mc.seed = meta_seed;
    mc.val_every = meta_val_every;
    mc.select_best_by_val = meta_val_select != 0;
    return mc;
  }

  DetectorParams detector() const {
    DetectorParams d;
    d.lambda = ewma_lambda;
    d.gamma = ewma_gamma;
    d.window = ewma_window;
    d.warmup_min = ewma_warmup;
    d.cooldown = cooldown;
    return d;
  }

  AdaptConfig adapt() const {
    AdaptConfig a;
    a.n_adapt = n_adapt;
    a.steps = adapt_steps;
    a.lr = adapt_lr;
    a.lambda_reg = lambda_reg;
    a.cooldown = cooldown;
    return a;
  }

 private:
  static bool parse_field(const std::string& val, double& out) {
    bool ok = false;
    const double v = parse_double(val, ok);
    if (ok) out = v;
    return ok;
  }
  template <typename T>
    requires std::is_integral_v<T>
  static bool parse_field(const std::string& val, T& out) {
    bool ok = false;
    const long long v = parse_int(val, ok);
    if (!ok || (std::is_unsigned_v<T> && v < 0)) return false;
    out = static_cast<T>(v);
    return true;
  }
  static bool parse_field(const std::string& val, std::string& out) {
    if (val.empty()) return false;
    out = val;
    return true;
  }
  template <typename T>
  static bool parse_field(const std::string& val, std::vector<T>& out) {
    std::vector<T> parsed;
    std::size_t pos = 0;
    while (pos <= val.size()) {
      const auto comma = val.find(',', pos);
      const auto part =
          val.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (!part.empty()) {
        T item{};
        if (!parse_field(part, item)) return false;
        parsed.push_back(item);
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (parsed.empty()) return false;
    out = std::move(parsed);
    return true;
  }

  static std::string format_field(double v) { return format_double(v); }
  template <typename T>
    requires std::is_integral_v<T>
  static std::string format_field(T v) {
    return std::to_string(v);
  }
  static std::string format_field(const std::string& v) { return v; }
  template <typename T>
  static std::string format_field(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ',';
      out += format_field(v[i]);
    }
    return out;
  }
};

}  // namespace driftcast
