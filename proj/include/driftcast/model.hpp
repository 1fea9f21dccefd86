#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "driftcast/nn.hpp"

namespace driftcast {

// One timestep of UE state at 1 Hz.
struct Observation {
  double t = 0.0;
  Vec2 p;
  double rsrp = 0.0;   // dBm, serving cell
  int beam = 0;        // angular sector seen from the serving BS
  double speed = 0.0;  // m/s
  double heading = 0.0;  // rad, in (-pi, pi]
  int cell = 0;        // serving cell id
};

struct Sample {
  std::vector<Observation> window;   // k observations
  std::vector<Vec2> target_pos;      // next H positions
  std::vector<uint8_t> target_ho;    // next H handover labels
  int task_id = -1;
  int traj = -1;   // provenance: source trajectory
  int start = -1;  // provenance: window start index within it
};

struct ForecastOutput {
  std::vector<Vec2> pred_pos;      // absolute frame, H entries
  std::vector<double> ho_logits;   // H entries
};

struct ModelConfig {
  std::size_t k = 10;       // input window length
  std::size_t horizon = 3;  // H
  std::size_t hidden = 64;
  std::vector<std::size_t> head_layers = {64, 64};
  double lambda_ho = 0.5;
  int n_beams = 16;
  // fixed global feature scales, recorded in checkpoints
  double s_pos = 100.0;
  double c_rsrp = -90.0;
  double s_rsrp = 20.0;
  double s_speed = 10.0;

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr std::size_t kFeatureCount = 7;

struct Featurized {
  std::vector<double> rows;  // k * kFeatureCount, row-major
  Vec2 anchor;               // last observed position
};

struct ForwardCache {
  Featurized feat;
  std::vector<GruStepCache> steps;
  MlpCache traj, ho;
  ForecastOutput output;
};

// Mean squared Euclidean distance over the horizon (m^2).
inline double loss_traj(std::span<const Vec2> pred, std::span<const Vec2> target) {
  if (pred.size() != target.size() || pred.empty())
    throw ContractError("loss_traj: horizon mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Vec2 d = pred[i] - target[i];
    s += d.x * d.x + d.y * d.y;
  }
  return s / static_cast<double>(pred.size());
}

// Mean binary cross-entropy from logits, log-sum-exp form so large logits
// cannot overflow.
inline double loss_ho(std::span<const double> logits, std::span<const uint8_t> labels) {
  if (logits.size() != labels.size() || logits.empty())
    throw ContractError("loss_ho: horizon mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double h = labels[i] ? 1.0 : 0.0;
    s += std::max(z, 0.0) - z * h + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<double>(logits.size());
}

// GRU encoder over the feature window plus two MLP heads: H*2 trajectory
// displacements (anchor-relative, scaled by s_pos) and H handover logits.
class Forecaster {
 public:
  explicit Forecaster(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.horizon < 1) throw ContractError("ModelConfig: horizon must be >= 1");
    if (cfg_.k < 2) throw ContractError("ModelConfig: k must be >= 2");
    if (cfg_.hidden < 1) throw ContractError("ModelConfig: hidden must be >= 1");
    if (cfg_.n_beams < 2) throw ContractError("ModelConfig: n_beams must be >= 2");

    auto layout = std::make_shared<ParamLayout>();
    const std::size_t in = kFeatureCount, hid = cfg_.hidden;
    for (const char* g : {"W_z", "W_r", "W_h"}) layout->add(std::string("gru.") + g, {hid, in});
    for (const char* g : {"U_z", "U_r", "U_h"}) layout->add(std::string("gru.") + g, {hid, hid});
    for (const char* g : {"b_z", "b_r", "b_h"}) layout->add(std::string("gru.") + g, {hid});

    traj_spec_ = make_head_spec(hid, cfg_.head_layers, 2 * cfg_.horizon);
    ho_spec_ = make_head_spec(hid, cfg_.head_layers, cfg_.horizon);
    traj_base_ = layout->entry_count();
    add_head_entries(*layout, "traj", traj_spec_);
    ho_base_ = layout->entry_count();
    add_head_entries(*layout, "ho", ho_spec_);
    layout_ = std::move(layout);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayoutPtr& layout() const { return layout_; }
  std::size_t param_count() const { return layout_->total_size(); }

  ParamVector init(uint64_t seed) const { return init_params(layout_, seed); }

  Featurized featurize(std::span<const Observation> window) const {
    if (window.size() != cfg_.k)
      throw ContractError("featurize: window length != k");
    Featurized f;
    f.anchor = window.back().p;
    f.rows.resize(cfg_.k * kFeatureCount);
    for (std::size_t i = 0; i < window.size(); ++i) {
      const Observation& o = window[i];
      double* r = f.rows.data() + i * kFeatureCount;
      r[0] = (o.p.x - f.anchor.x) / cfg_.s_pos;
      r[1] = (o.p.y - f.anchor.y) / cfg_.s_pos;
      r[2] = (o.rsrp - cfg_.c_rsrp) / cfg_.s_rsrp;
      r[3] = static_cast<double>(o.beam) / static_cast<double>(cfg_.n_beams - 1);
      r[4] = o.speed / cfg_.s_speed;
      r[5] = std::sin(o.heading);
      r[6] = std::cos(o.heading);
    }
    return f;
  }

  ForecastOutput forward(const ParamVector& theta, std::span<const Observation> window,
                         ForwardCache* cache_out = nullptr) const {
    check_theta(theta);
    ForwardCache local;
    ForwardCache& c = cache_out ? *cache_out : local;
    c.feat = featurize(window);
    const auto bound = bind(theta);

    const GruDims dims{kFeatureCount, cfg_.hidden};
    c.steps.resize(cfg_.k);
    std::vector<double> h(cfg_.hidden, 0.0);
    for (std::size_t i = 0; i < cfg_.k; ++i) {
      std::span<const double> x(c.feat.rows.data() + i * kFeatureCount, kFeatureCount);
      gru_forward(bound.gru, dims, x, h, c.steps[i]);
      h = c.steps[i].h_next;
    }

    auto disp = mlp_forward(bound.traj, traj_spec_, h, c.traj);
    auto logits = mlp_forward(bound.ho, ho_spec_, h, c.ho);

    c.output.pred_pos.resize(cfg_.horizon);
    for (std::size_t tau = 0; tau < cfg_.horizon; ++tau)
      c.output.pred_pos[tau] =
          c.feat.anchor + Vec2{disp[2 * tau], disp[2 * tau + 1]} * cfg_.s_pos;
    c.output.ho_logits.assign(logits.begin(), logits.end());
    return c.output;
  }

  double loss_joint(const Sample& sample, const ForecastOutput& out) const {
    return loss_traj(out.pred_pos, sample.target_pos) +
           cfg_.lambda_ho * loss_ho(out.ho_logits, sample.target_ho);
  }

  // Exact analytic gradient of the joint loss through featurize -> GRU ->
  // heads. Feature rows are data; scaling constants are not differentiated.
  double grad_joint(const ParamVector& theta, const Sample& sample, GradVector& grad) const {
    check_sample(sample);
    ForwardCache c;
    forward(theta, sample.window, &c);
    const double loss = loss_joint(sample, c.output);

    if (!same_layout(grad.layout(), layout_)) grad = GradVector(layout_);
    else std::fill(grad.values().begin(), grad.values().end(), 0.0);
    const auto bound = bind(theta);
    auto grads = bind_grads(grad);

    const double h_count = static_cast<double>(cfg_.horizon);
    std::vector<double> d_disp(2 * cfg_.horizon);
    for (std::size_t tau = 0; tau < cfg_.horizon; ++tau) {
      const Vec2 d = c.output.pred_pos[tau] - sample.target_pos[tau];
      d_disp[2 * tau] = (2.0 / h_count) * d.x * cfg_.s_pos;
      d_disp[2 * tau + 1] = (2.0 / h_count) * d.y * cfg_.s_pos;
    }
    std::vector<double> d_logit(cfg_.horizon);
    for (std::size_t tau = 0; tau < cfg_.horizon; ++tau) {
      const double h = sample.target_ho[tau] ? 1.0 : 0.0;
      d_logit[tau] = cfg_.lambda_ho * (sigmoid(c.output.ho_logits[tau]) - h) / h_count;
    }

    std::vector<double> grad_h(cfg_.hidden, 0.0);
    mlp_backward(bound.traj, traj_spec_, c.traj, d_disp, grads.traj, grad_h);
    mlp_backward(bound.ho, ho_spec_, c.ho, d_logit, grads.ho, grad_h);

    const GruDims dims{kFeatureCount, cfg_.hidden};
    std::vector<double> grad_x(kFeatureCount), grad_h_prev(cfg_.hidden);
    for (std::size_t i = cfg_.k; i-- > 0;) {
      std::fill(grad_x.begin(), grad_x.end(), 0.0);
      std::fill(grad_h_prev.begin(), grad_h_prev.end(), 0.0);
      gru_backward(bound.gru, dims, c.steps[i], grad_h, grads.gru, grad_x, grad_h_prev);
      grad_h = grad_h_prev;
    }
    return loss;
  }

  // Mean joint loss and gradient over a batch.
  double grad_joint_batch(const ParamVector& theta, std::span<const Sample* const> batch,
                          GradVector& grad) const {
    if (batch.empty()) throw ContractError("grad_joint_batch: empty batch");
    grad = GradVector(layout_);
    GradVector sample_grad(layout_);
    double loss_sum = 0.0;
    for (const Sample* s : batch) {
      loss_sum += grad_joint(theta, *s, sample_grad);
      axpy(grad, 1.0, sample_grad);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= inv;
    return loss_sum * inv;
  }

  double mean_loss(const ParamVector& theta, std::span<const Sample* const> batch) const {
    if (batch.empty()) throw ContractError("mean_loss: empty batch");
    double s = 0.0;
    for (const Sample* sm : batch) s += loss_joint(*sm, forward(theta, sm->window));
    return s / static_cast<double>(batch.size());
  }

 private:
  struct Bound {
    GruParams gru;
    MlpParams traj, ho;
  };
  struct BoundGrads {
    GruGrads gru;
    MlpGrads traj, ho;
  };

  static MlpSpec make_head_spec(std::size_t in, const std::vector<std::size_t>& hidden_layers,
                                std::size_t out) {
    MlpSpec spec;
    spec.dims.push_back(in);
    for (std::size_t h : hidden_layers) {
      spec.dims.push_back(h);
      spec.activations.push_back(Activation::Tanh);
    }
    spec.dims.push_back(out);
    spec.activations.push_back(Activation::Identity);
    return spec;
  }

  static void add_head_entries(ParamLayout& layout, const std::string& prefix,
                               const MlpSpec& spec) {
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
      layout.add(prefix + ".W" + std::to_string(l), {spec.dims[l + 1], spec.dims[l]});
      layout.add(prefix + ".b" + std::to_string(l), {spec.dims[l + 1]});
    }
  }

  void check_theta(const ParamVector& theta) const {
    if (!same_layout(theta.layout(), layout_))
      throw ContractError("Forecaster: parameter layout does not match config");
  }

  void check_sample(const Sample& s) const {
    if (s.window.size() != cfg_.k || s.target_pos.size() != cfg_.horizon ||
        s.target_ho.size() != cfg_.horizon)
      throw ContractError("Sample: window/target lengths do not match config");
  }

  template <typename PV, typename MatT, typename SpanT>
  static void bind_head(PV& v, std::size_t base, const MlpSpec& spec,
                        MlpRefs<MatT, SpanT>& out) {
    out.w.clear();
    out.b.clear();
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
      auto ws = v.slice(base + 2 * l);
      out.w.push_back(MatT{ws.data(), spec.dims[l + 1], spec.dims[l]});
      out.b.push_back(v.slice(base + 2 * l + 1));
    }
  }

  Bound bind(const ParamVector& theta) const {
    Bound b;
    const std::size_t hid = cfg_.hidden, in = kFeatureCount;
    auto mat = [&](std::size_t e, std::size_t r, std::size_t c) {
      return ConstMat{theta.slice(e).data(), r, c};
    };
    b.gru.wz = mat(0, hid, in);
    b.gru.wr = mat(1, hid, in);
    b.gru.wh = mat(2, hid, in);
    b.gru.uz = mat(3, hid, hid);
    b.gru.ur = mat(4, hid, hid);
    b.gru.uh = mat(5, hid, hid);
    b.gru.bz = theta.slice(6);
    b.gru.br = theta.slice(7);
    b.gru.bh = theta.slice(8);
    bind_head(theta, traj_base_, traj_spec_, b.traj);
    bind_head(theta, ho_base_, ho_spec_, b.ho);
    return b;
  }

  BoundGrads bind_grads(GradVector& grad) const {
    BoundGrads b;
    const std::size_t hid = cfg_.hidden, in = kFeatureCount;
    auto mat = [&](std::size_t e, std::size_t r, std::size_t c) {
      return Mat{grad.slice(e).data(), r, c};
    };
    b.gru.wz = mat(0, hid, in);
    b.gru.wr = mat(1, hid, in);
    b.gru.wh = mat(2, hid, in);
    b.gru.uz = mat(3, hid, hid);
    b.gru.ur = mat(4, hid, hid);
    b.gru.uh = mat(5, hid, hid);
    b.gru.bz = grad.slice(6);
    b.gru.br = grad.slice(7);
    b.gru.bh = grad.slice(8);
    bind_head(grad, traj_base_, traj_spec_, b.traj);
    bind_head(grad, ho_base_, ho_spec_, b.ho);
    return b;
  }

  ModelConfig cfg_;
  ParamLayoutPtr layout_;
  MlpSpec traj_spec_, ho_spec_;
  std::size_t traj_base_ = 0, ho_base_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint file format:
//   line 1:  DRIFTCAST-CKPT v1
//   config   key=value lines (fixed key set)
//   layout   "name dim0 dim1 ..." lines
//   values   one shortest-round-trip decimal per line
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "DRIFTCAST-CKPT v1";

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline std::string checkpoint_to_string(const ParamVector& theta, const ModelConfig& cfg) {
  std::ostringstream os;
  os << kCheckpointMagic << '\n';
  os << "k=" << cfg.k << '\n';
  os << "horizon=" << cfg.horizon << '\n';
  os << "hidden=" << cfg.hidden << '\n';
  os << "head_layers=" << detail::join_sizes(cfg.head_layers, ',') << '\n';
  os << "lambda_ho=" << format_double(cfg.lambda_ho) << '\n';
  os << "n_beams=" << cfg.n_beams << '\n';
  os << "s_pos=" << format_double(cfg.s_pos) << '\n';
  os << "c_rsrp=" << format_double(cfg.c_rsrp) << '\n';
  os << "s_rsrp=" << format_double(cfg.s_rsrp) << '\n';
  os << "s_speed=" << format_double(cfg.s_speed) << '\n';
  const auto& layout = *theta.layout();
  for (std::size_t e = 0; e < layout.entry_count(); ++e) {
    os << layout.entry(e).name;
    for (std::size_t d : layout.entry(e).shape) os << ' ' << d;
    os << '\n';
  }
  for (double v : theta.values()) os << format_double(v) << '\n';
  return os.str();
}

inline void save_checkpoint(const ParamVector& theta, const ModelConfig& cfg,
                            const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open checkpoint for writing: " + path);
  f << checkpoint_to_string(theta, cfg);
}

struct Checkpoint {
  ParamVector theta;
  ModelConfig config;
};

inline Checkpoint load_checkpoint_from_string(const std::string& text,
                                              const std::string& origin = "<memory>") {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;
    return true;
  };

  if (!next_line()) throw fail("empty checkpoint");
  if (line != kCheckpointMagic) {
    if (line.rfind("DRIFTCAST-CKPT", 0) == 0)
      throw fail("unsupported checkpoint version: '" + line + "'");
    throw fail("not a checkpoint file");
  }

  ModelConfig cfg;
  std::vector<bool> seen(10, false);
  bool in_config = true;
  auto layout = std::make_shared<ParamLayout>();
  std::vector<double> values;

  auto parse_config = [&](std::string_view key, std::string_view val) {
    bool ok = true;
    auto as_size = [&](std::string_view s) {
      long long v = parse_int(s, ok);
      if (!ok || v < 0) throw fail("bad integer value");
      return static_cast<std::size_t>(v);
    };
    if (key == "k") { cfg.k = as_size(val); seen[0] = true; }
    else if (key == "horizon") { cfg.horizon = as_size(val); seen[1] = true; }
    else if (key == "hidden") { cfg.hidden = as_size(val); seen[2] = true; }
    else if (key == "head_layers") {
      cfg.head_layers.clear();
      std::size_t pos = 0;
      while (pos <= val.size()) {
        const std::size_t comma = val.find(',', pos);
        const auto part = val.substr(pos, comma == std::string_view::npos ? val.size() - pos
                                                                          : comma - pos);
        if (!part.empty()) cfg.head_layers.push_back(as_size(part));
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
      }
      seen[3] = true;
    }
    else if (key == "lambda_ho") { cfg.lambda_ho = parse_double(val, ok); seen[4] = true; }
    else if (key == "n_beams") { cfg.n_beams = static_cast<int>(as_size(val)); seen[5] = true; }
    else if (key == "s_pos") { cfg.s_pos = parse_double(val, ok); seen[6] = true; }
    else if (key == "c_rsrp") { cfg.c_rsrp = parse_double(val, ok); seen[7] = true; }
    else if (key == "s_rsrp") { cfg.s_rsrp = parse_double(val, ok); seen[8] = true; }
    else if (key == "s_speed") { cfg.s_speed = parse_double(val, ok); seen[9] = true; }
    else throw fail("unknown config key '" + std::string(key) + "'");
    if (!ok) throw fail("bad value for key '" + std::string(key) + "'");
  };

  while (next_line()) {
    if (line.empty()) throw fail("unexpected blank line");
    const std::size_t eq = line.find('=');
    if (in_config && eq != std::string::npos) {
      parse_config(std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
      continue;
    }
    in_config = false;
    // a line whose first token parses as a number starts the value section
    bool numeric = false;
    const double maybe = parse_double(line, numeric);
    if (numeric) {
      values.push_back(maybe);
      continue;
    }
    if (!values.empty()) throw fail("malformed value line");
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    std::vector<std::size_t> shape;
    long long d = 0;
    while (ls >> d) {
      if (d <= 0) throw fail("bad layout dimension");
      shape.push_back(static_cast<std::size_t>(d));
    }
    if (!ls.eof() || shape.empty()) throw fail("malformed layout entry");
    layout->add(name, shape);
  }

  for (bool s : seen)
    if (!s) throw fail("missing config key");

  Forecaster model(cfg);
  if (!(*layout == *model.layout()))
    throw ParseError(origin + ": layout does not match config");
  if (values.size() != layout->total_size())
    throw fail("truncated value section: expected " + std::to_string(layout->total_size()) +
               " values, found " + std::to_string(values.size()));
  return {ParamVector(model.layout(), std::move(values)), cfg};
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_checkpoint_from_string(ss.str(), path);
}

}  // namespace driftcast
