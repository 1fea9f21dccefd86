#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "driftcast/model.hpp"
#include "test_util.hpp"

using namespace driftcast;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.k = 3;
  cfg.horizon = 2;
  cfg.hidden = 3;
  cfg.head_layers = {4};
  cfg.n_beams = 8;
  return cfg;
}

Sample shifted(const Sample& s, Vec2 c) {
  Sample out = s;
  for (auto& o : out.window) o.p = o.p + c;
  for (auto& p : out.target_pos) p = p + c;
  return out;
}

}  // namespace

TEST_CASE("featurize") {
  ModelConfig cfg;
  cfg.k = 4;
  Forecaster model(cfg);

  SECTION("window sitting at the anchor has zero position features") {
    Observation o;
    o.p = {37.5, -12.0};
    std::vector<Observation> window(cfg.k, o);
    auto f = model.featurize(window);
    CHECK(f.anchor == Vec2{37.5, -12.0});
    for (std::size_t i = 0; i < cfg.k; ++i) {
      CHECK(f.rows[i * kFeatureCount + 0] == 0.0);
      CHECK(f.rows[i * kFeatureCount + 1] == 0.0);
    }
  }

  SECTION("heading encodes as sin/cos") {
    Observation o;
    std::vector<Observation> window(cfg.k, o);
    window[0].heading = 0.0;
    window[1].heading = M_PI / 2.0;
    auto f = model.featurize(window);
    CHECK(std::abs(f.rows[0 * kFeatureCount + 5] - 0.0) < 1e-12);
    CHECK(std::abs(f.rows[0 * kFeatureCount + 6] - 1.0) < 1e-12);
    CHECK(std::abs(f.rows[1 * kFeatureCount + 5] - 1.0) < 1e-12);
    CHECK(std::abs(f.rows[1 * kFeatureCount + 6] - 0.0) < 1e-12);
  }

  SECTION("scaling constants map rsrp=-90 to 0 and speed=10 to 1") {
    Observation o;
    o.rsrp = -90.0;
    o.speed = 10.0;
    std::vector<Observation> window(cfg.k, o);
    auto f = model.featurize(window);
    CHECK(f.rows[2] == 0.0);
    CHECK(f.rows[4] == 1.0);
  }

  SECTION("short window is rejected") {
    std::vector<Observation> window(cfg.k - 1);
    CHECK_THROWS_AS(model.featurize(window), ContractError);
  }
}

TEST_CASE("forward with zero parameters predicts the anchor") {
  auto cfg = small_config();
  Forecaster model(cfg);
  ParamVector theta(model.layout());
  auto s = testutil::random_sample(cfg, 17);
  auto out = model.forward(theta, s.window);
  for (const auto& p : out.pred_pos) {
    CHECK(p.x == s.window.back().p.x);
    CHECK(p.y == s.window.back().p.y);
  }
  for (double z : out.ho_logits) CHECK(z == 0.0);
}

TEST_CASE("forward is translation equivariant") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(3);
  auto s = testutil::random_sample(cfg, 29);
  // snap to a dyadic grid so adding the shift is exact in binary; the
  // equivariance itself is algebraic (anchor-relative features)
  for (auto& o : s.window) {
    o.p.x = std::round(o.p.x * 64.0) / 64.0;
    o.p.y = std::round(o.p.y * 64.0) / 64.0;
  }
  auto base = model.forward(theta, s.window);
  for (Vec2 c : {Vec2{100.0, -250.0}, Vec2{-3.5, 0.25}, Vec2{4096.5, 1024.25}}) {
    auto moved = model.forward(theta, shifted(s, c).window);
    for (std::size_t tau = 0; tau < cfg.horizon; ++tau) {
      CHECK(moved.pred_pos[tau].x == base.pred_pos[tau].x + c.x);
      CHECK(moved.pred_pos[tau].y == base.pred_pos[tau].y + c.y);
    }
    // logits see identical features, so they match bitwise
    for (std::size_t tau = 0; tau < cfg.horizon; ++tau)
      CHECK(moved.ho_logits[tau] == base.ho_logits[tau]);
  }
}

TEST_CASE("forward matches a manual composition of the kernel primitives") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(3);
  auto s = testutil::random_sample(cfg, 41);
  auto out = model.forward(theta, s.window);

  // featurize, unroll the GRU, then run both heads by hand
  auto f = model.featurize(s.window);
  auto gru = testutil::bind_gru(theta, kFeatureCount, cfg.hidden);
  GruDims dims{kFeatureCount, cfg.hidden};
  std::vector<double> h(cfg.hidden, 0.0);
  GruStepCache c;
  for (std::size_t i = 0; i < cfg.k; ++i) {
    gru_forward(gru, dims, {f.rows.data() + i * kFeatureCount, kFeatureCount}, h, c);
    h = c.h_next;
  }

  MlpSpec traj_spec{{cfg.hidden, 4, 2 * cfg.horizon}, {Activation::Tanh, Activation::Identity}};
  MlpSpec ho_spec{{cfg.hidden, 4, cfg.horizon}, {Activation::Tanh, Activation::Identity}};
  auto bind_head = [&](std::size_t base, const MlpSpec& spec) {
    MlpParams p;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
      p.w.push_back(ConstMat{theta.slice(base + 2 * l).data(), spec.dims[l + 1], spec.dims[l]});
      p.b.push_back(theta.slice(base + 2 * l + 1));
    }
    return p;
  };
  MlpCache tc, hc;
  auto disp = mlp_forward(bind_head(9, traj_spec), traj_spec, h, tc);
  auto logits = mlp_forward(bind_head(13, ho_spec), ho_spec, h, hc);

  for (std::size_t tau = 0; tau < cfg.horizon; ++tau) {
    CHECK(std::abs(out.pred_pos[tau].x - (f.anchor.x + cfg.s_pos * disp[2 * tau])) < 1e-12);
    CHECK(std::abs(out.pred_pos[tau].y - (f.anchor.y + cfg.s_pos * disp[2 * tau + 1])) < 1e-12);
    CHECK(std::abs(out.ho_logits[tau] - logits[tau]) < 1e-12);
  }
}

TEST_CASE("loss_traj") {
  std::vector<Vec2> a{{0, 0}}, b{{3, 4}};
  CHECK(loss_traj(a, a) == 0.0);
  CHECK(loss_traj(a, b) == 25.0);

  std::vector<Vec2> pred{{1, 0}, {2, 0}, {3, 0}};
  std::vector<Vec2> tgt{{0, 0}, {0, 0}, {0, 0}};
  CHECK(loss_traj(pred, tgt) == Catch::Approx(14.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("loss_ho is a stable mean BCE") {
  std::vector<double> z0{0.0};
  std::vector<uint8_t> one{1};
  CHECK(loss_ho(z0, one) == Catch::Approx(std::log(2.0)).epsilon(1e-14));

  std::vector<double> big{50.0};
  CHECK(loss_ho(big, one) < 1e-20);
  CHECK(std::isfinite(loss_ho(big, one)));
  std::vector<double> vbig{750.0};  // exp(-750) underflows, must not overflow or NaN
  CHECK(std::isfinite(loss_ho(vbig, one)));
  std::vector<uint8_t> zero{0};
  CHECK(loss_ho(vbig, zero) == Catch::Approx(750.0).epsilon(1e-12));

  std::vector<double> z3{0.0, 0.0, 0.0};
  std::vector<uint8_t> l3{1, 0, 1};
  CHECK(loss_ho(z3, l3) == Catch::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("loss_joint") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto s = testutil::random_sample(cfg, 55);

  ForecastOutput out;
  out.pred_pos = s.target_pos;
  out.ho_logits.assign(cfg.horizon, 0.0);

  SECTION("lambda_ho=0 reduces to the trajectory loss") {
    auto c2 = cfg;
    c2.lambda_ho = 0.0;
    Forecaster m2(c2);
    CHECK(m2.loss_joint(s, out) == loss_traj(out.pred_pos, s.target_pos));
  }

  SECTION("weighted sum") {
    ForecastOutput o2 = out;
    o2.pred_pos[0] = s.target_pos[0] + Vec2{2.0, 0.0};  // squared distance 4 over H=2 -> 2.0
    std::vector<uint8_t> ones(cfg.horizon, 1);
    Sample s2 = s;
    s2.target_ho = ones;
    auto c3 = cfg;
    c3.lambda_ho = 1.0;
    Forecaster m3(c3);
    CHECK(m3.loss_joint(s2, o2) == Catch::Approx(2.0 + std::log(2.0)).epsilon(1e-14));
  }

  SECTION("non-negative") { CHECK(model.loss_joint(s, out) >= 0.0); }
}

TEST_CASE("grad_joint matches central finite differences") {
  // seeds sit away from the FD oracle's truncation floor (coordinates with
  // |grad| ~ 1e-6 make the central difference itself unreliable at eps=1e-5)
  for (uint64_t seed : {1ULL, 3ULL, 6ULL, 7ULL}) {
    auto cfg = small_config();
    Forecaster model(cfg);
    auto theta = model.init(seed);
    auto s = testutil::fd_sample(model, theta, seed + 100);

    GradVector g(model.layout());
    model.grad_joint(theta, s, g);
    auto f = [&](const ParamVector& t) {
      return model.loss_joint(s, model.forward(t, s.window));
    };
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double fd = testutil::central_diff(f, theta, i);
      const double rel = std::abs(g[i] - fd) / (std::abs(fd) + 1e-8);
      if (rel >= 1e-4) {
        CAPTURE(seed, i, g[i], fd);
        REQUIRE(rel < 1e-4);
      }
    }
  }
}

TEST_CASE("grad_joint vanishes at a saturated exact fit") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(8);
  // push the HO head output bias far positive and label everything 1
  const std::size_t ho_out_bias = model.layout()->index_of("ho.b1");
  {
    auto s = theta.slice(ho_out_bias);
    for (double& v : s) v = 60.0;
  }
  auto s = testutil::random_sample(cfg, 8);
  s.target_ho.assign(cfg.horizon, 1);
  s.target_pos = model.forward(theta, s.window).pred_pos;

  GradVector g(model.layout());
  model.grad_joint(theta, s, g);
  double m = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) m = std::max(m, std::abs(g[i]));
  CHECK(m < 1e-12);
}

TEST_CASE("batch gradient equals the mean of per-sample gradients") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(4);
  std::vector<Sample> samples;
  for (uint64_t i = 0; i < 4; ++i) samples.push_back(testutil::random_sample(cfg, 200 + i));
  std::vector<const Sample*> refs;
  for (const auto& s : samples) refs.push_back(&s);

  GradVector batch(model.layout());
  model.grad_joint_batch(theta, refs, batch);

  GradVector mean(model.layout()), tmp(model.layout());
  for (const auto& s : samples) {
    model.grad_joint(theta, s, tmp);
    axpy(mean, 0.25, tmp);
  }
  CHECK(max_abs_diff(batch, mean) < 1e-12);
}

TEST_CASE("checkpoint round-trip is bitwise lossless") {
  auto cfg = small_config();
  cfg.lambda_ho = 0.3;
  Forecaster model(cfg);
  auto theta = model.init(77);
  theta[0] = 0.1 + 0.2;  // not exactly representable sums survive too

  const auto text = checkpoint_to_string(theta, cfg);
  auto loaded = load_checkpoint_from_string(text);
  CHECK(loaded.config == cfg);
  REQUIRE(loaded.theta.size() == theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) CHECK(loaded.theta[i] == theta[i]);
  CHECK(checkpoint_to_string(loaded.theta, loaded.config) == text);
}

TEST_CASE("checkpoint file round-trip") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(5);
  const auto path = std::filesystem::temp_directory_path() / "driftcast_ckpt_test.txt";
  save_checkpoint(theta, cfg, path.string());
  auto loaded = load_checkpoint(path.string());
  for (std::size_t i = 0; i < theta.size(); ++i) CHECK(loaded.theta[i] == theta[i]);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors") {
  auto cfg = small_config();
  Forecaster model(cfg);
  auto theta = model.init(6);
  const auto text = checkpoint_to_string(theta, cfg);

  SECTION("unsupported version") {
    auto bad = text;
    bad.replace(bad.find("v1"), 2, "v2");
    CHECK_THROWS_WITH(load_checkpoint_from_string(bad),
                      Catch::Matchers::ContainsSubstring("version"));
  }

  SECTION("truncated file names the line") {
    auto cut = text.substr(0, text.size() / 2);
    cut = cut.substr(0, cut.rfind('\n') + 1);
    try {
      load_checkpoint_from_string(cut, "ckpt");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("ckpt:") != std::string::npos);
    }
  }

  SECTION("garbage rejected") {
    CHECK_THROWS_AS(load_checkpoint_from_string("hello\nworld\n"), ParseError);
  }

  SECTION("layout inconsistent with config") {
    // claim hidden=4 in the config while the layout says 3
    auto bad = text;
    bad.replace(bad.find("hidden=3"), 8, "hidden=4");
    CHECK_THROWS_AS(load_checkpoint_from_string(bad), ParseError);
  }
}
