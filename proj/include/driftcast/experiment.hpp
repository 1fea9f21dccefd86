#pragma once

#include <atomic>
#include <chrono>
#include <mutex>
#include <filesystem>
#include <thread>

#include <json.hpp>

#include "driftcast/baselines.hpp"
#include "driftcast/config.hpp"
#include "driftcast/drift.hpp"
#include "driftcast/meta.hpp"
#include "driftcast/metrics.hpp"
#include "driftcast/mobility.hpp"

namespace driftcast {

using Json = nlohmann::ordered_json;

namespace tags {
inline constexpr uint64_t kEnv = 0x656e76ULL;
inline constexpr uint64_t kData = 0x64617461ULL;
inline constexpr uint64_t kTraj = 0x74726aULL;
inline constexpr uint64_t kTasks = 0x74736b73ULL;
inline constexpr uint64_t kSplit = 0x73706c74ULL;
inline constexpr uint64_t kOffInit = 0x6f666669ULL;
inline constexpr uint64_t kOffline = 0x6f66666cULL;
inline constexpr uint64_t kMetaInit = 0x6d746931ULL;
inline constexpr uint64_t kMeta = 0x6d657461ULL;
inline constexpr uint64_t kFewshot = 0x66737368ULL;
inline constexpr uint64_t kDrift = 0x64726674ULL;
inline constexpr uint64_t kHo = 0x686f7374ULL;
}  // namespace tags

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Dataset {
  RadioEnvironment env;
  std::vector<std::vector<Observation>> trajectories;
  std::vector<Task> tasks;
  TaskSplit split;

  std::vector<const Task*> tasks_of(std::span<const int> ids) const {
    std::vector<const Task*> out;
    for (int id : ids) out.push_back(&tasks[static_cast<std::size_t>(id)]);
    return out;
  }
  std::vector<Task> copy_tasks(std::span<const int> ids) const {
    std::vector<Task> out;
    for (int id : ids) out.push_back(tasks[static_cast<std::size_t>(id)]);
    return out;
  }
};

inline Dataset build_dataset(const ExperimentConfig& cfg, uint64_t seed) {
  Dataset ds;
  ds.env = cfg.radio_env(derive_seed(seed, {tags::kEnv}));

  Rng draw(derive_seed(seed, {tags::kData}));
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < cfg.n_trajectories; ++i) {
    TrajectoryConfig t;
    t.duration = cfg.traj_duration;
    t.base_speed = draw.uniform(cfg.speed_min, cfg.speed_max);
    t.heading_noise = draw.uniform(cfg.heading_noise_min, cfg.heading_noise_max);
    t.gps_noise = cfg.gps_noise;
    t.turn_bias = draw.normal(0.0, cfg.turn_bias_scale);
    t.heading_pull = cfg.heading_pull;
    t.preferred_heading = draw.uniform(-M_PI, M_PI);
    t.init_heading = draw.uniform(-M_PI, M_PI);
    t.origin = {draw.uniform(0.0, cfg.area), draw.uniform(0.0, cfg.area)};
    t.seed = derive_seed(seed, {tags::kTraj, i});
    auto obs = make_observations(generate_trajectory(t), ds.env);
    auto s = make_samples(obs, cfg.k, cfg.horizon, cfg.stride);
    for (auto& sample : s) sample.traj = static_cast<int>(i);
    samples.insert(samples.end(), s.begin(), s.end());
    ds.trajectories.push_back(std::move(obs));
  }

  std::vector<Task> tasks =
      cfg.task_mode == "tiles"
          ? tile_tasks(samples, cfg.tile_extent)
          : kmeans_tasks(samples, std::min(cfg.kmeans_k, samples.size()),
                         derive_seed(seed, {tags::kTasks}));

  // tasks too small for an episode cannot participate in any protocol
  const std::size_t min_size = cfg.support_size + cfg.query_size;
  std::vector<Task> kept;
  for (auto& t : tasks)
    if (t.samples.size() >= min_size) kept.push_back(std::move(t));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    kept[i].id = static_cast<int>(i);
    for (auto& s : kept[i].samples) s.task_id = kept[i].id;
  }
  ds.tasks = std::move(kept);
  if (ds.tasks.size() < 5)
    throw ContractError("build_dataset: fewer than 5 usable tasks; enlarge the dataset");

  SplitSpec spec;
  spec.train = cfg.split_train;
  spec.val = cfg.split_val;
  spec.test = cfg.split_test;
  spec.seed = derive_seed(seed, {tags::kSplit});
  ds.split = split_tasks(ds.tasks.size(), spec);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset persistence: manifest.json + per-trajectory CSV + tasks.json
// ---------------------------------------------------------------------------

inline std::string observations_to_csv(std::span<const Observation> obs) {
  std::ostringstream os;
  os << "t,x,y,speed,heading,rsrp,beam,cell\n";
  for (const auto& o : obs)
    os << format_double(o.t) << ',' << format_double(o.p.x) << ',' << format_double(o.p.y) << ','
       << format_double(o.speed) << ',' << format_double(o.heading) << ','
       << format_double(o.rsrp) << ',' << o.beam << ',' << o.cell << '\n';
  return os.str();
}

inline std::vector<Observation> observations_from_csv(std::istream& in,
                                                      const std::string& origin) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(origin + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x,y,speed,heading,rsrp,beam,cell")
    throw ParseError(origin + ":1: bad header");
  std::vector<Observation> obs;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string, 8> f;
    std::size_t pos = 0;
    for (int i = 0; i < 8; ++i) {
      const auto comma = line.find(',', pos);
      if (i < 7 && comma == std::string::npos)
        throw ParseError(origin + ":" + std::to_string(line_no) + ": expected 8 fields");
      f[i] = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      pos = comma + 1;
    }
    bool ok = true, all_ok = true;
    Observation o;
    o.t = parse_double(f[0], ok); all_ok &= ok;
    o.p.x = parse_double(f[1], ok); all_ok &= ok;
    o.p.y = parse_double(f[2], ok); all_ok &= ok;
    o.speed = parse_double(f[3], ok); all_ok &= ok;
    o.heading = parse_double(f[4], ok); all_ok &= ok;
    o.rsrp = parse_double(f[5], ok); all_ok &= ok;
    o.beam = static_cast<int>(parse_int(f[6], ok)); all_ok &= ok;
    o.cell = static_cast<int>(parse_int(f[7], ok)); all_ok &= ok;
    if (!all_ok) throw ParseError(origin + ":" + std::to_string(line_no) + ": bad field");
    obs.push_back(o);
  }
  return obs;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot write: " + path.string());
  f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_dataset(const Dataset& ds, const ExperimentConfig& cfg, uint64_t seed,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    std::snprintf(name, sizeof(name), "traj_%03zu.csv", i);
    write_text(dir / name, observations_to_csv(ds.trajectories[i]));
  }

  Json tasks = Json::array();
  for (const auto& t : ds.tasks) {
    Json jt;
    jt["id"] = t.id;
    jt["name"] = t.name;
    Json prov = Json::array();
    for (const auto& s : t.samples) prov.push_back(Json::array({s.traj, s.start}));
    jt["samples"] = std::move(prov);
    tasks.push_back(std::move(jt));
  }
  write_text(dir / "tasks.json", tasks.dump(2) + "\n");

  Json m;
  m["tool"] = std::string("driftcast ") + kVersion;
  m["config_hash"] = cfg.hash_hex();
  m["seed"] = seed;
  m["n_trajectories"] = ds.trajectories.size();
  std::size_t n_samples = 0;
  for (const auto& t : ds.tasks) n_samples += t.samples.size();
  m["n_samples"] = n_samples;
  m["n_tasks"] = ds.tasks.size();
  m["task_mode"] = cfg.task_mode;
  Json tl = Json::array();
  for (const auto& t : ds.tasks)
    tl.push_back(Json{{"id", t.id}, {"name", t.name}, {"count", t.samples.size()}});
  m["tasks"] = std::move(tl);
  m["split"] = Json{{"train", ds.split.train}, {"val", ds.split.val}, {"test", ds.split.test}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                            uint64_t seed) {
  const Json m = Json::parse(read_text(dir / "manifest.json"));
  if (m.at("config_hash").get<std::string>() != cfg.hash_hex())
    throw ParseError("dataset at " + dir.string() + " was built with a different config");

  Dataset ds;
  ds.env = cfg.radio_env(derive_seed(seed, {tags::kEnv}));
  const auto n_traj = m.at("n_trajectories").get<std::size_t>();
  char name[32];
  for (std::size_t i = 0; i < n_traj; ++i) {
    std::snprintf(name, sizeof(name), "traj_%03zu.csv", i);
    std::ifstream f(dir / name, std::ios::binary);
    if (!f) throw ParseError("missing " + (dir / name).string());
    ds.trajectories.push_back(observations_from_csv(f, (dir / name).string()));
  }

  const Json tasks = Json::parse(read_text(dir / "tasks.json"));
  for (const auto& jt : tasks) {
    Task t;
    t.id = jt.at("id").get<int>();
    t.name = jt.at("name").get<std::string>();
    for (const auto& prov : jt.at("samples")) {
      const int traj = prov.at(0).get<int>();
      const int start = prov.at(1).get<int>();
      auto s = make_samples(
          std::span<const Observation>(ds.trajectories[traj]).subspan(start, cfg.k + cfg.horizon),
          cfg.k, cfg.horizon, 1);
      if (s.size() != 1) throw ParseError("tasks.json: bad sample provenance");
      s[0].traj = traj;
      s[0].start = start;
      s[0].task_id = t.id;
      t.samples.push_back(std::move(s[0]));
    }
    ds.tasks.push_back(std::move(t));
  }
  ds.split.train = m.at("split").at("train").get<std::vector<int>>();
  ds.split.val = m.at("split").at("val").get<std::vector<int>>();
  ds.split.test = m.at("split").at("test").get<std::vector<int>>();
  return ds;
}

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

struct OfflineResult {
  ParamVector theta;
  std::vector<double> train_loss, val_loss;
  int best_epoch = -1;
};

// Adam minibatch training on the pooled train-task samples; the returned
// parameters are the epoch with the best validation loss.
inline OfflineResult train_offline(const Forecaster& model, const Dataset& ds,
                                   const ExperimentConfig& cfg, uint64_t seed) {
  SampleRefs pool, val;
  for (int id : ds.split.train)
    for (const auto& s : ds.tasks[id].samples) pool.push_back(&s);
  for (int id : ds.split.val)
    for (const auto& s : ds.tasks[id].samples) val.push_back(&s);
  if (pool.empty()) throw ContractError("train_offline: no training samples");

  OfflineResult res{model.init(derive_seed(seed, {tags::kOffInit})), {}, {}, -1};
  ParamVector theta = res.theta;
  AdamState adam(model.layout());
  AdamConfig acfg;
  acfg.lr = cfg.offline_lr;
  GradVector grad(model.layout());
  double best_val = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (int epoch = 0; epoch < cfg.offline_epochs; ++epoch) {
    Rng rng(derive_seed(seed, {tags::kOffline, static_cast<uint64_t>(epoch)}));
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
      const std::size_t j = i + rng.uniform_int(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    SampleRefs batch;
    for (std::size_t lo = 0; lo < idx.size(); lo += cfg.offline_batch) {
      batch.clear();
      for (std::size_t i = lo; i < std::min(idx.size(), lo + cfg.offline_batch); ++i)
        batch.push_back(pool[idx[i]]);
      epoch_loss += model.grad_joint_batch(theta, batch, grad);
      adam_step(adam, theta, grad, acfg);
      ++n_batches;
    }
    res.train_loss.push_back(epoch_loss / static_cast<double>(n_batches));
    if (!val.empty()) {
      const double v = model.mean_loss(theta, val);
      res.val_loss.push_back(v);
      if (v < best_val) {
        best_val = v;
        res.theta = theta;
        res.best_epoch = epoch;
      }
    } else {
      res.theta = theta;
      res.best_epoch = epoch;
    }
  }
  if (cfg.offline_epochs == 0) res.theta = theta;
  return res;
}

struct SeedArtifacts {
  Dataset dataset;
  std::optional<ParamVector> offline, reptile, fomaml;
};

inline SeedArtifacts prepare_seed(const Forecaster& model, const ExperimentConfig& cfg,
                                  uint64_t seed, bool need_offline, bool need_reptile,
                                  bool need_fomaml) {
  SeedArtifacts art{build_dataset(cfg, seed), {}, {}, {}};
  if (need_offline) art.offline = train_offline(model, art.dataset, cfg, seed).theta;
  if (need_reptile || need_fomaml) {
    const auto train_tasks = art.dataset.copy_tasks(art.dataset.split.train);
    const auto val_tasks = art.dataset.copy_tasks(art.dataset.split.val);
    const auto theta0 = model.init(derive_seed(seed, {tags::kMetaInit}));
    if (need_reptile)
      art.reptile = meta_train(model, theta0, train_tasks, cfg.meta(derive_seed(seed, {tags::kMeta, 1})),
                               MetaAlgo::Reptile, val_tasks)
                        .theta_star;
    if (need_fomaml)
      art.fomaml = meta_train(model, theta0, train_tasks, cfg.meta(derive_seed(seed, {tags::kMeta, 2})),
                              MetaAlgo::Fomaml, val_tasks)
                       .theta_star;
  }
  return art;
}

// ---------------------------------------------------------------------------
// Protocols (per seed, each returns a flat metric map)
// ---------------------------------------------------------------------------

inline std::map<std::string, double> zeroshot_metrics(const Forecaster& model,
                                                      const SeedArtifacts& art,
                                                      std::span<const std::string> methods,
                                                      const ExperimentConfig& cfg) {
  std::map<std::string, double> out;
  const auto& ds = art.dataset;
  for (const auto& method : methods) {
    double ade_sum = 0.0, fde_sum = 0.0;
    std::size_t n = 0;
    for (int id : ds.split.test) {
      for (const auto& s : ds.tasks[id].samples) {
        std::vector<Vec2> pred;
        if (method == "cv") {
          pred = cv_predict(s.window, cfg.horizon);
        } else if (method == "kf") {
          pred = kf_predict_window(s.window, cfg.horizon);
        } else {
          const ParamVector* theta = method == "offline"  ? &*art.offline
                                     : method == "reptile" ? &*art.reptile
                                                           : &*art.fomaml;
          pred = model.forward(*theta, s.window).pred_pos;
        }
        ade_sum += ade(pred, s.target_pos);
        fde_sum += fde(pred, s.target_pos);
        ++n;
      }
    }
    out["ade_" + method] = ade_sum / static_cast<double>(n);
    out["fde_" + method] = fde_sum / static_cast<double>(n);
  }
  return out;
}

inline std::map<std::string, double> fewshot_metrics(const Forecaster& model,
                                                     const SeedArtifacts& art,
                                                     const ExperimentConfig& cfg, uint64_t seed) {
  const auto& ds = art.dataset;
  const int max_shot = *std::max_element(cfg.shots.begin(), cfg.shots.end());
  std::map<std::string, std::pair<double, std::size_t>> acc;

  struct Net {
    const char* name;
    const ParamVector* theta;
  };
  const Net nets[2] = {{"reptile", &*art.reptile}, {"offline", &*art.offline}};

  for (int id : ds.split.test) {
    const Task& task = ds.tasks[id];
    if (task.samples.size() < static_cast<std::size_t>(max_shot) + cfg.query_size) continue;
    Rng rng(derive_seed(seed, {tags::kFewshot, static_cast<uint64_t>(id)}));
    std::vector<std::size_t> idx(task.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
      const std::size_t j = i + rng.uniform_int(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    SampleRefs query, pool;
    for (std::size_t i = 0; i < cfg.query_size; ++i) query.push_back(&task.samples[idx[i]]);
    for (int i = 0; i < max_shot; ++i)
      pool.push_back(&task.samples[idx[cfg.query_size + static_cast<std::size_t>(i)]]);

    auto eval_ade = [&](const ParamVector& theta) {
      double s = 0.0;
      for (const Sample* q : query) s += ade(model.forward(theta, q->window).pred_pos, q->target_pos);
      return s / static_cast<double>(query.size());
    };

    for (const auto& net : nets) {
      auto add = [&](const std::string& key, double v) {
        auto& slot = acc[key];
        slot.first += v;
        slot.second += 1;
      };
      add(std::string("ade_") + net.name + "_shot0", eval_ade(*net.theta));
      for (int shot : cfg.shots) {
        SampleRefs support(pool.begin(), pool.begin() + shot);
        const auto adapted =
            inner_adapt(model, *net.theta, support, cfg.inner_lr, cfg.inner_steps);
        add(std::string("ade_") + net.name + "_shot" + std::to_string(shot), eval_ade(adapted));
      }
    }
  }
  if (acc.empty())
    throw ContractError(
        "fewshot_metrics: no test task has max_shot + query_size samples; "
        "increase traj_duration or reduce stride");
  std::map<std::string, double> out;
  for (const auto& [key, slot] : acc) out[key] = slot.first / static_cast<double>(slot.second);
  return out;
}

enum class DriftScenario { SuddenTurn, SpeedShift };

inline const char* to_string(DriftScenario s) {
  return s == DriftScenario::SuddenTurn ? "sudden_turn" : "speed_shift";
}

// One drift stream: a fresh trajectory with a single injected event. The
// event time is carried as metadata only.
inline std::vector<Sample> make_drift_stream(const ExperimentConfig& cfg,
                                             const RadioEnvironment& env, uint64_t seed,
                                             std::size_t index, DriftScenario scenario) {
  Rng rng(derive_seed(seed, {tags::kDrift, index, static_cast<uint64_t>(scenario)}));
  TrajectoryConfig t;
  t.duration = cfg.drift_duration;
  t.base_speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  t.heading_noise = rng.uniform(cfg.heading_noise_min, cfg.heading_noise_max);
  t.gps_noise = cfg.gps_noise;
  t.turn_bias = rng.normal(0.0, cfg.turn_bias_scale);
  t.heading_pull = cfg.heading_pull;
  t.preferred_heading = rng.uniform(-M_PI, M_PI);
  t.init_heading = rng.uniform(-M_PI, M_PI);
  t.origin = {rng.uniform(0.0, cfg.area), rng.uniform(0.0, cfg.area)};
  DriftEvent e;
  e.time = cfg.drift_time;
  if (scenario == DriftScenario::SuddenTurn) {
    e.kind = DriftEvent::Kind::SuddenTurn;
    e.magnitude = rng.uniform() < 0.5 ? cfg.turn_magnitude : -cfg.turn_magnitude;
  } else {
    // speed-up only: a slowdown shrinks the achievable post-drift error, so
    // recovery to a pre-drift baseline would no longer measure adaptation
    e.kind = DriftEvent::Kind::SpeedShift;
    e.magnitude = cfg.speed_factor;
  }
  t.drift = {e};
  t.seed = derive_seed(seed, {tags::kDrift, index, 0x747261636bULL});
  auto obs = make_observations(generate_trajectory(t), env);
  auto stream = make_samples(obs, cfg.k, cfg.horizon, 1);
  for (auto& s : stream) s.traj = static_cast<int>(index);
  return stream;
}

inline std::map<std::string, double> drift_metrics(const Forecaster& model,
                                                   const SeedArtifacts& art,
                                                   const ExperimentConfig& cfg, uint64_t seed,
                                                   DriftScenario scenario) {
  // first stream index whose targets can include the event
  const auto drift_idx =
      static_cast<std::size_t>(cfg.drift_time) - cfg.k - cfg.horizon + 1;
  RecoveryConfig rc{cfg.recovery_pre, cfg.recovery_roll, cfg.recovery_factor};

  struct MethodAcc {
    double pre = 0, p0 = 0, p5 = 0, p10 = 0, p20 = 0, recovery = 0;
  };
  std::map<std::string, MethodAcc> acc;

  for (std::size_t s = 0; s < cfg.drift_streams; ++s) {
    const auto stream = make_drift_stream(cfg, art.dataset.env, seed, s, scenario);

    StreamOptions ours;
    ours.mode = AdaptMode::EwmaTriggered;
    ours.detector = cfg.detector();
    ours.adapt = cfg.adapt();
    StreamOptions frozen;
    frozen.mode = AdaptMode::None;

    struct Run {
      const char* name;
      StreamResult result;
    };
    Run runs[3] = {
        {"ours", run_stream(model, *art.reptile, stream, ours)},
        {"offline", run_stream(model, *art.offline, stream, frozen)},
        {"sliding",
         sliding_window_finetune(model, *art.offline, stream, cfg.n_adapt, 1, cfg.adapt_lr)},
    };
    for (auto& run : runs) {
      std::vector<double> trace;
      trace.reserve(run.result.trace.size());
      for (const auto& r : run.result.trace) trace.push_back(r.ade);
      auto& a = acc[run.name];
      const std::size_t lo = drift_idx - std::min<std::size_t>(cfg.recovery_pre, drift_idx);
      double pre = 0.0;
      for (std::size_t i = lo; i < drift_idx; ++i) pre += trace[i];
      a.pre += pre / static_cast<double>(drift_idx - lo);
      a.p0 += trace[drift_idx];
      a.p5 += trace[drift_idx + 5];
      a.p10 += trace[drift_idx + 10];
      a.p20 += trace[drift_idx + 20];
      const auto rec = recovery_time(trace, drift_idx, rc);
      a.recovery += rec ? static_cast<double>(*rec)
                        : static_cast<double>(trace.size() - drift_idx);
    }
  }

  std::map<std::string, double> out;
  const auto n = static_cast<double>(cfg.drift_streams);
  for (const auto& [name, a] : acc) {
    out["ade_pre_" + name] = a.pre / n;
    out["ade_plus0_" + name] = a.p0 / n;
    out["ade_plus5_" + name] = a.p5 / n;
    out["ade_plus10_" + name] = a.p10 / n;
    out["ade_plus20_" + name] = a.p20 / n;
    out["recovery_" + name] = a.recovery / n;
  }
  return out;
}

// Margin of the strongest other cell over `cell` at position p (dB);
// positive means the argmax cell differs from `cell`.
inline double cell_margin(const RadioEnvironment& env, Vec2 p, int cell) {
  double serving = 0.0, best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < env.bs.size(); ++b) {
    const double v = rsrp(env, b, p);
    if (static_cast<int>(b) == cell) serving = v;
    else best_other = std::max(best_other, v);
  }
  return best_other - serving;
}

// Downstream HO evaluation. Outcomes are aligned per step: a method's
// decision about step t is scored against the true label at t. Ping-pong is
// computed on each method's implied cell sequence; the HO-head classifier
// has no cell identity, so consecutive predicted events within the window
// stand in for it.
inline std::map<std::string, double> ho_metrics(const Forecaster& model, const SeedArtifacts& art,
                                                const ExperimentConfig& cfg, uint64_t seed) {
  const auto& env = art.dataset.env;
  struct MethodAcc {
    std::vector<HoOutcome> outcomes;   // continuous scores, for AUROC
    std::vector<HoOutcome> decisions;  // executed/thresholded decisions, for F1
    long missed = 0, true_total = 0;
    double pp_sum = 0;
    std::size_t pp_n = 0;
  };
  std::map<std::string, MethodAcc> acc;
  const A3Config a3cfg{cfg.hysteresis_db, cfg.ttt};

  for (std::size_t s = 0; s < cfg.ho_streams; ++s) {
    Rng rng(derive_seed(seed, {tags::kHo, s}));
    TrajectoryConfig t;
    t.duration = cfg.drift_duration;
    t.base_speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    t.heading_noise = rng.uniform(cfg.heading_noise_min, cfg.heading_noise_max);
    t.gps_noise = cfg.gps_noise;
    t.turn_bias = rng.normal(0.0, cfg.turn_bias_scale);
    t.heading_pull = cfg.heading_pull;
    t.preferred_heading = rng.uniform(-M_PI, M_PI);
    t.init_heading = rng.uniform(-M_PI, M_PI);
    t.origin = {rng.uniform(0.0, cfg.area), rng.uniform(0.0, cfg.area)};
    t.seed = derive_seed(seed, {tags::kHo, s, 1});
    const auto obs = make_observations(generate_trajectory(t), env);
    const auto stream = make_samples(obs, cfg.k, cfg.horizon, 1);
    if (stream.empty()) continue;

    std::vector<int> true_cells;
    for (const auto& o : obs) true_cells.push_back(o.cell);
    const auto labels = label_handover(true_cells);  // labels[t-1] is h_t
    std::vector<int> true_events;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i]) true_events.push_back(static_cast<int>(i + 1));

    auto add_event_metrics = [&](MethodAcc& a, const std::vector<int>& pred_events) {
      std::vector<bool> used(pred_events.size(), false);
      for (int te : true_events) {
        int best = -1, best_gap = cfg.missed_tol + 1;
        for (std::size_t j = 0; j < pred_events.size(); ++j) {
          if (used[j]) continue;
          const int gap = std::abs(pred_events[j] - te);
          if (gap < best_gap) {
            best_gap = gap;
            best = static_cast<int>(j);
          }
        }
        if (best >= 0 && best_gap <= cfg.missed_tol) used[best] = true;
        else ++a.missed;
      }
      a.true_total += static_cast<long>(true_events.size());
    };

    // RSRP threshold heuristic: decisions at t against h_t
    {
      std::vector<Vec2> positions;
      for (const auto& o : obs) positions.push_back(o.p);
      const auto a3 = rsrp_threshold_heuristic(env, positions, a3cfg);
      auto& a = acc["heuristic"];
      std::vector<int> events;
      for (std::size_t t2 = 1; t2 < obs.size(); ++t2) {
        a.outcomes.push_back({labels[t2 - 1], a3.margin_db[t2]});
        a.decisions.push_back({labels[t2 - 1], a3.ho[t2] ? 1.0 : 0.0});
        if (a3.ho[t2]) events.push_back(static_cast<int>(t2));
      }
      add_event_metrics(a, events);
      bool defined = false;
      const double pp = ping_pong_rate(a3.serving, cfg.ping_pong_window, &defined);
      if (defined) {
        a.pp_sum += pp;
        a.pp_n += 1;
      }
    }

    // direct HO-head classifier on the offline GRU: sample i predicts t=i+k
    {
      StreamOptions frozen;
      frozen.mode = AdaptMode::None;
      const auto run = run_stream(model, *art.offline, stream, frozen);
      auto& a = acc["hohead"];
      std::vector<int> events;
      for (std::size_t i = 0; i < run.trace.size(); ++i) {
        const auto t2 = i + cfg.k;
        const bool fired = run.trace[i].ho_prob[0] >= cfg.ho_threshold;
        a.outcomes.push_back({labels[t2 - 1], run.trace[i].ho_prob[0]});
        a.decisions.push_back({labels[t2 - 1], fired ? 1.0 : 0.0});
        if (fired) events.push_back(static_cast<int>(t2));
      }
      add_event_metrics(a, events);
      bool defined = false;
      const double pp = ping_pong_rate_events(events, cfg.ping_pong_window, &defined);
      if (defined) {
        a.pp_sum += pp;
        a.pp_n += 1;
      }
    }

    // trajectory -> serving-cell inference on the adaptive model. Handovers
    // are executed with the same A3 rule as the heuristic, but driven by the
    // RSRP at the predicted next position, so the comparison isolates
    // reactive vs. anticipatory signals under one executor.
    {
      StreamOptions ours;
      ours.mode = AdaptMode::EwmaTriggered;
      ours.detector = cfg.detector();
      ours.adapt = cfg.adapt();
      const auto run = run_stream(model, *art.reptile, stream, ours);
      auto& a = acc["ours"];
      std::vector<int> events;
      std::vector<int> exec_cells{stream.front().window.back().cell};
      std::vector<double> levels;
      int serving = exec_cells.front();
      int streak = 0;
      for (std::size_t i = 0; i < run.trace.size(); ++i) {
        const auto t2 = i + cfg.k;
        const Vec2 pred = run.trace[i].pred[0];
        rsrp_all(env, pred, levels);
        int best_other = -1;
        double best_val = -std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < levels.size(); ++b) {
          if (static_cast<int>(b) == serving) continue;
          if (levels[b] > best_val) {
            best_val = levels[b];
            best_other = static_cast<int>(b);
          }
        }
        const double margin = best_val - levels[static_cast<std::size_t>(serving)];
        a.outcomes.push_back({labels[t2 - 1], margin});
        bool fired = false;
        if (margin > cfg.hysteresis_db) {
          if (++streak >= cfg.ttt) {
            serving = best_other;
            streak = 0;
            fired = true;
            events.push_back(static_cast<int>(t2));
          }
        } else {
          streak = 0;
        }
        a.decisions.push_back({labels[t2 - 1], fired ? 1.0 : 0.0});
        exec_cells.push_back(serving);
      }
      add_event_metrics(a, events);
      bool defined = false;
      const double pp = ping_pong_rate(exec_cells, cfg.ping_pong_window, &defined);
      if (defined) {
        a.pp_sum += pp;
        a.pp_n += 1;
      }
    }
  }

  std::map<std::string, double> out;
  for (auto& [name, a] : acc) {
    const auto cls = classification_metrics(a.decisions, 0.5);
    out["f1_" + name] = cls.f1;
    out["auroc_" + name] = auroc(a.outcomes);
    out["missed_" + name] =
        a.true_total > 0 ? static_cast<double>(a.missed) / static_cast<double>(a.true_total) : 0.0;
    out["pingpong_" + name] = a.pp_n > 0 ? a.pp_sum / static_cast<double>(a.pp_n) : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-seed runner and reports
// ---------------------------------------------------------------------------

struct RunOutput {
  Json report;
  Json timings;
};

inline Json aggregate_to_json(const SeedAggregate& agg) {
  Json out;
  for (const auto& [key, a] : agg.metrics)
    out[key] = Json{{"mean", a.mean}, {"std", a.stddev}};
  return out;
}

template <typename PerSeed>
inline RunOutput run_seeds(const ExperimentConfig& cfg, const std::string& protocol,
                           PerSeed&& per_seed) {
  const int n = cfg.seeds;
  std::vector<std::map<std::string, double>> results(n);
  std::vector<double> wall(n, 0.0);
  std::atomic<int> next{0};
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned workers = std::min<unsigned>(hw, static_cast<unsigned>(n));
  std::vector<std::thread> threads;
  std::exception_ptr error;
  std::mutex error_mu;
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          const auto t0 = std::chrono::steady_clock::now();
          results[i] = per_seed(cfg.seed + static_cast<uint64_t>(i));
          wall[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);

  Forecaster model(cfg.model());
  RunOutput out;
  out.report["tool"] = std::string("driftcast ") + kVersion;
  out.report["protocol"] = protocol;
  out.report["config_hash"] = cfg.hash_hex();
  out.report["param_count"] = model.param_count();
  Json seeds = Json::array();
  Json per_seed_json = Json::array();
  for (int i = 0; i < n; ++i) {
    seeds.push_back(cfg.seed + static_cast<uint64_t>(i));
    Json entry;
    entry["seed"] = cfg.seed + static_cast<uint64_t>(i);
    Json metrics;
    for (const auto& [k2, v] : results[i]) metrics[k2] = v;
    entry["metrics"] = std::move(metrics);
    per_seed_json.push_back(std::move(entry));
  }
  out.report["seeds"] = std::move(seeds);
  out.report["per_seed"] = std::move(per_seed_json);
  out.report["aggregate"] = aggregate_to_json(aggregate_seeds(results));

  out.timings["protocol"] = protocol;
  Json wj = Json::array();
  for (double v : wall) wj.push_back(v);
  out.timings["per_seed_wall_s"] = std::move(wj);
  return out;
}

inline std::string aggregate_csv(const Json& report) {
  std::ostringstream os;
  os << "protocol,metric,mean,std\n";
  const std::string protocol = report.at("protocol").get<std::string>();
  for (const auto& [key, value] : report.at("aggregate").items())
    os << protocol << ',' << key << ',' << format_double(value.at("mean").get<double>()) << ','
       << format_double(value.at("std").get<double>()) << '\n';
  return os.str();
}

inline void write_run_output(const std::filesystem::path& dir, const RunOutput& out) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", out.report.dump(2) + "\n");
  write_text(dir / "timings.json", out.timings.dump(2) + "\n");
  write_text(dir / "table.csv", aggregate_csv(out.report));
}

// ---------------------------------------------------------------------------
// Command implementations (shared by the CLI and the acceptance suite)
// ---------------------------------------------------------------------------

inline void cmd_build_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const auto ds = build_dataset(cfg, cfg.seed);
  save_dataset(ds, cfg, cfg.seed, out_dir);
}

inline void cmd_meta_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                           MetaAlgo algo, const std::filesystem::path& out_dir) {
  const auto ds = load_dataset(data_dir, cfg, cfg.seed);
  Forecaster model(cfg.model());
  const auto train_tasks = ds.copy_tasks(ds.split.train);
  const auto val_tasks = ds.copy_tasks(ds.split.val);
  const auto theta0 = model.init(derive_seed(cfg.seed, {tags::kMetaInit}));
  const auto res = meta_train(model, theta0, train_tasks,
                              cfg.meta(derive_seed(cfg.seed, {tags::kMeta, algo == MetaAlgo::Reptile ? 1u : 2u})),
                              algo, val_tasks);
  std::filesystem::create_directories(out_dir);
  save_checkpoint(res.theta_star, cfg.model(), (out_dir / "checkpoint.txt").string());
  std::ostringstream hist;
  hist << "iteration,query_loss\n";
  for (std::size_t i = 0; i < res.query_loss_history.size(); ++i)
    hist << (i + 1) << ',' << format_double(res.query_loss_history[i]) << '\n';
  write_text(out_dir / "history.csv", hist.str());
  std::ostringstream vh;
  vh << "iteration,val_loss\n";
  for (const auto& [iter, loss] : res.val_history)
    vh << iter << ',' << format_double(loss) << '\n';
  write_text(out_dir / "val_history.csv", vh.str());
}

inline RunOutput cmd_eval_zeroshot(const ExperimentConfig& cfg,
                                   const std::vector<std::string>& methods) {
  for (const auto& m : methods)
    if (m != "cv" && m != "kf" && m != "offline" && m != "reptile" && m != "fomaml")
      throw ParseError("unknown method '" + m + "'");
  const bool off = std::count(methods.begin(), methods.end(), "offline") > 0;
  const bool rep = std::count(methods.begin(), methods.end(), "reptile") > 0;
  const bool fom = std::count(methods.begin(), methods.end(), "fomaml") > 0;
  return run_seeds(cfg, "zeroshot", [&](uint64_t seed) {
    Forecaster model(cfg.model());
    const auto art = prepare_seed(model, cfg, seed, off, rep, fom);
    return zeroshot_metrics(model, art, methods, cfg);
  });
}

inline RunOutput cmd_eval_fewshot(const ExperimentConfig& cfg) {
  return run_seeds(cfg, "fewshot", [&](uint64_t seed) {
    Forecaster model(cfg.model());
    const auto art = prepare_seed(model, cfg, seed, true, true, false);
    return fewshot_metrics(model, art, cfg, seed);
  });
}

inline RunOutput cmd_eval_drift(const ExperimentConfig& cfg, DriftScenario scenario) {
  return run_seeds(cfg, std::string("drift_") + to_string(scenario), [&](uint64_t seed) {
    Forecaster model(cfg.model());
    const auto art = prepare_seed(model, cfg, seed, true, true, false);
    return drift_metrics(model, art, cfg, seed, scenario);
  });
}

inline RunOutput cmd_eval_ho(const ExperimentConfig& cfg) {
  return run_seeds(cfg, "ho", [&](uint64_t seed) {
    Forecaster model(cfg.model());
    const auto art = prepare_seed(model, cfg, seed, true, true, false);
    return ho_metrics(model, art, cfg, seed);
  });
}

inline void cmd_report(const std::vector<std::filesystem::path>& run_dirs,
                       const std::filesystem::path& out_dir) {
  Json merged = Json::array();
  std::ostringstream csv;
  csv << "run,protocol,metric,mean,std\n";
  for (const auto& dir : run_dirs) {
    const Json report = Json::parse(read_text(dir / "report.json"));
    const std::string protocol = report.at("protocol").get<std::string>();
    for (const auto& [key, value] : report.at("aggregate").items())
      csv << dir.string() << ',' << protocol << ',' << key << ','
          << format_double(value.at("mean").get<double>()) << ','
          << format_double(value.at("std").get<double>()) << '\n';
    Json entry;
    entry["dir"] = dir.string();
    entry["report"] = report;
    merged.push_back(std::move(entry));
  }
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "consolidated.json", merged.dump(2) + "\n");
  write_text(out_dir / "consolidated.csv", csv.str());
}

}  // namespace driftcast
