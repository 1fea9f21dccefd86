#include <catch2/catch_amalgamated.hpp>

#include "driftcast/nn.hpp"
#include "test_util.hpp"

using namespace driftcast;
using testutil::bind_gru;
using testutil::bind_gru_grads;
using testutil::gru_layout;

namespace {

ParamLayoutPtr mlp_layout(const MlpSpec& spec) {
  auto l = std::make_shared<ParamLayout>();
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    l->add("W" + std::to_string(i), {spec.dims[i + 1], spec.dims[i]});
    l->add("b" + std::to_string(i), {spec.dims[i + 1]});
  }
  return l;
}

MlpParams bind_mlp(const ParamVector& v, const MlpSpec& spec) {
  MlpParams p;
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    p.w.push_back(ConstMat{v.slice(2 * i).data(), spec.dims[i + 1], spec.dims[i]});
    p.b.push_back(v.slice(2 * i + 1));
  }
  return p;
}

MlpGrads bind_mlp_grads(ParamVector& v, const MlpSpec& spec) {
  MlpGrads g;
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    g.w.push_back(Mat{v.slice(2 * i).data(), spec.dims[i + 1], spec.dims[i]});
    g.b.push_back(v.slice(2 * i + 1));
  }
  return g;
}

std::vector<double> run_gru(const ParamVector& theta, std::size_t in, std::size_t hid,
                            std::span<const double> x, std::span<const double> h_prev) {
  GruStepCache c;
  gru_forward(bind_gru(theta, in, hid), {in, hid}, x, h_prev, c);
  return c.h_next;
}

}  // namespace

TEST_CASE("gru_forward zero parameters") {
  auto layout = gru_layout(3, 2);
  ParamVector theta(layout);
  GruStepCache c;
  const std::vector<double> x{0.7, -1.1, 2.0}, h{0.0, 0.0};
  gru_forward(bind_gru(theta, 3, 2), {3, 2}, x, h, c);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(c.z_gate[i] == 0.5);
    CHECK(c.r_gate[i] == 0.5);
    CHECK(c.h_hat[i] == 0.0);
    CHECK(c.h_next[i] == 0.0);
  }
}

TEST_CASE("gru_forward saturated update gate forgets h_prev") {
  auto layout = gru_layout(1, 1);
  ParamVector theta(layout);
  theta[layout->entry(layout->index_of("W_z")).offset] = 100.0;
  theta[layout->entry(layout->index_of("U_z")).offset] = 100.0;
  theta[layout->entry(layout->index_of("b_z")).offset] = 100.0;
  // candidate path left at zero -> h_hat = 0
  for (double hp : {0.0, 0.5, 9.0}) {
    const std::vector<double> x{1.0}, h{hp};
    auto out = run_gru(theta, 1, 1, x, h);
    CHECK(std::abs(out[0]) < 1e-12);
  }
}

TEST_CASE("gru_forward matches straight-line re-evaluation of the cell equations") {
  const std::size_t in = 2, hid = 2;
  auto layout = gru_layout(in, hid);
  auto theta = testutil::random_params(layout, 42);
  const std::vector<double> x{0.3, -0.8}, h{0.25, -0.5};
  auto out = run_gru(theta, in, hid, x, h);

  // independent scalar re-evaluation
  auto p = bind_gru(theta, in, hid);
  for (std::size_t i = 0; i < hid; ++i) {
    double az = p.bz[i], ar = p.br[i];
    for (std::size_t j = 0; j < in; ++j) az += p.wz(i, j) * x[j];
    for (std::size_t j = 0; j < hid; ++j) az += p.uz(i, j) * h[j];
    for (std::size_t j = 0; j < in; ++j) ar += p.wr(i, j) * x[j];
    for (std::size_t j = 0; j < hid; ++j) ar += p.ur(i, j) * h[j];
    const double zg = 1.0 / (1.0 + std::exp(-az));
    const double rg = 1.0 / (1.0 + std::exp(-ar));
    double ah = p.bh[i];
    for (std::size_t j = 0; j < in; ++j) ah += p.wh(i, j) * x[j];
    // reset gate for coordinate j needs its own r_g
    for (std::size_t j = 0; j < hid; ++j) {
      double arj = p.br[j];
      for (std::size_t m = 0; m < in; ++m) arj += p.wr(j, m) * x[m];
      for (std::size_t m = 0; m < hid; ++m) arj += p.ur(j, m) * h[m];
      const double rgj = 1.0 / (1.0 + std::exp(-arj));
      ah += p.uh(i, j) * (rgj * h[j]);
    }
    const double hh = std::tanh(ah);
    const double expect = (1.0 - zg) * h[i] + zg * hh;
    CHECK(std::abs(out[i] - expect) < 1e-12);
    (void)rg;
  }
}

TEST_CASE("gru_backward zero upstream gradient") {
  const std::size_t in = 2, hid = 3;
  auto layout = gru_layout(in, hid);
  auto theta = testutil::random_params(layout, 5);
  GruStepCache c;
  const std::vector<double> x{0.1, 0.2}, h{0.3, -0.1, 0.6};
  gru_forward(bind_gru(theta, in, hid), {in, hid}, x, h, c);

  ParamVector grads(layout);
  std::vector<double> gx(in, 0.0), gh(hid, 0.0), up(hid, 0.0);
  gru_backward(bind_gru(theta, in, hid), {in, hid}, c, up, bind_gru_grads(grads, in, hid), gx, gh);
  for (std::size_t i = 0; i < grads.size(); ++i) CHECK(grads[i] == 0.0);
  for (double v : gx) CHECK(v == 0.0);
  for (double v : gh) CHECK(v == 0.0);
}

TEST_CASE("gru_backward matches central finite differences on a scalar cell") {
  const std::size_t in = 1, hid = 1;
  auto layout = gru_layout(in, hid);
  auto theta = testutil::random_params(layout, 7);
  const std::vector<double> x{0.4}, h{-0.3};

  GruStepCache c;
  gru_forward(bind_gru(theta, in, hid), {in, hid}, x, h, c);
  ParamVector grads(layout);
  std::vector<double> gx(1, 0.0), gh(1, 0.0);
  const std::vector<double> up{1.0};
  gru_backward(bind_gru(theta, in, hid), {in, hid}, c, up, bind_gru_grads(grads, in, hid), gx, gh);

  const double eps = 1e-5;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto f = [&](const ParamVector& t) { return run_gru(t, in, hid, x, h)[0]; };
    const double fd = testutil::central_diff(f, theta, i, eps);
    CHECK(std::abs(grads[i] - fd) / (std::abs(fd) + 1e-8) < 1e-6);
  }
  // input and previous-state partials
  {
    std::vector<double> xp{x[0] + eps}, xm{x[0] - eps};
    const double fd = (run_gru(theta, in, hid, xp, h)[0] - run_gru(theta, in, hid, xm, h)[0]) /
                      (2 * eps);
    CHECK(std::abs(gx[0] - fd) / (std::abs(fd) + 1e-8) < 1e-6);
  }
  {
    std::vector<double> hp{h[0] + eps}, hm{h[0] - eps};
    const double fd = (run_gru(theta, in, hid, x, hp)[0] - run_gru(theta, in, hid, x, hm)[0]) /
                      (2 * eps);
    CHECK(std::abs(gh[0] - fd) / (std::abs(fd) + 1e-8) < 1e-6);
  }
}

TEST_CASE("gru_backward is linear in the upstream gradient") {
  const std::size_t in = 2, hid = 2;
  auto layout = gru_layout(in, hid);
  auto theta = testutil::random_params(layout, 13);
  const std::vector<double> x{0.5, -0.2}, h{0.1, 0.9};
  GruStepCache c;
  gru_forward(bind_gru(theta, in, hid), {in, hid}, x, h, c);

  const std::vector<double> g1{0.3, -0.7}, g2{0.6, -1.4};
  ParamVector a(layout), b(layout);
  std::vector<double> ax(in, 0.0), ah(hid, 0.0), bx(in, 0.0), bh(hid, 0.0);
  gru_backward(bind_gru(theta, in, hid), {in, hid}, c, g1, bind_gru_grads(a, in, hid), ax, ah);
  gru_backward(bind_gru(theta, in, hid), {in, hid}, c, g2, bind_gru_grads(b, in, hid), bx, bh);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == Catch::Approx(2.0 * a[i]).margin(1e-14));
  for (std::size_t i = 0; i < in; ++i) CHECK(bx[i] == Catch::Approx(2.0 * ax[i]).margin(1e-14));
  for (std::size_t i = 0; i < hid; ++i) CHECK(bh[i] == Catch::Approx(2.0 * ah[i]).margin(1e-14));
}

TEST_CASE("mlp_forward basics") {
  MlpSpec spec{{3, 2}, {Activation::Identity}};
  auto layout = mlp_layout(spec);

  SECTION("zero weights give zero output") {
    ParamVector theta(layout);
    MlpCache c;
    const std::vector<double> x{1.0, -2.0, 3.0};
    auto y = mlp_forward(bind_mlp(theta, spec), spec, x, c);
    for (double v : y) CHECK(v == 0.0);
  }

  SECTION("identity layer with W=I passes input through") {
    MlpSpec id{{3, 3}, {Activation::Identity}};
    auto l = mlp_layout(id);
    ParamVector theta(l);
    auto w = theta.slice(0);
    for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    MlpCache c;
    const std::vector<double> x{0.5, -1.5, 2.5};
    auto y = mlp_forward(bind_mlp(theta, id), id, x, c);
    for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == x[i]);
  }
}

TEST_CASE("mlp_forward matches scalar reference on a 2-layer tanh net") {
  MlpSpec spec{{2, 3, 2}, {Activation::Tanh, Activation::Identity}};
  auto layout = mlp_layout(spec);
  auto theta = testutil::random_params(layout, 11);
  const std::vector<double> x{0.4, -0.9};
  MlpCache c;
  auto y = mlp_forward(bind_mlp(theta, spec), spec, x, c);

  auto p = bind_mlp(theta, spec);
  double hidden[3];
  for (std::size_t i = 0; i < 3; ++i) {
    double a = p.b[0][i];
    for (std::size_t j = 0; j < 2; ++j) a += p.w[0](i, j) * x[j];
    hidden[i] = std::tanh(a);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    double a = p.b[1][i];
    for (std::size_t j = 0; j < 3; ++j) a += p.w[1](i, j) * hidden[j];
    CHECK(std::abs(y[i] - a) < 1e-12);
  }
}

TEST_CASE("mlp_backward") {
  MlpSpec spec{{2, 4, 3}, {Activation::Tanh, Activation::Identity}};
  auto layout = mlp_layout(spec);
  auto theta = testutil::random_params(layout, 23);
  const std::vector<double> x{0.7, 0.1};

  SECTION("zero upstream gradient gives zeros") {
    MlpCache c;
    mlp_forward(bind_mlp(theta, spec), spec, x, c);
    ParamVector g(layout);
    std::vector<double> gx(2, 0.0);
    const std::vector<double> up(3, 0.0);
    mlp_backward(bind_mlp(theta, spec), spec, c, up, bind_mlp_grads(g, spec), gx);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
    for (double v : gx) CHECK(v == 0.0);
  }

  SECTION("matches finite differences on a scalar objective") {
    // objective: weighted sum of outputs
    const std::vector<double> w{0.3, -1.2, 0.8};
    auto objective = [&](const ParamVector& t) {
      MlpCache c;
      auto y = mlp_forward(bind_mlp(t, spec), spec, x, c);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
      return s;
    };
    MlpCache c;
    mlp_forward(bind_mlp(theta, spec), spec, x, c);
    ParamVector g(layout);
    std::vector<double> gx(2, 0.0);
    mlp_backward(bind_mlp(theta, spec), spec, c, w, bind_mlp_grads(g, spec), gx);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double fd = testutil::central_diff(objective, theta, i);
      CHECK(std::abs(g[i] - fd) / (std::abs(fd) + 1e-8) < 1e-6);
    }
  }

  SECTION("grad_x of identity single layer with W=I equals grad_y") {
    MlpSpec id{{3, 3}, {Activation::Identity}};
    auto l = mlp_layout(id);
    ParamVector t(l);
    auto wi = t.slice(0);
    for (std::size_t i = 0; i < 3; ++i) wi[i * 3 + i] = 1.0;
    MlpCache c;
    const std::vector<double> xin{1.0, 2.0, 3.0};
    mlp_forward(bind_mlp(t, id), id, xin, c);
    ParamVector g(l);
    std::vector<double> gx(3, 0.0);
    const std::vector<double> up{0.5, -0.25, 4.0};
    mlp_backward(bind_mlp(t, id), id, c, up, bind_mlp_grads(g, id), gx);
    for (std::size_t i = 0; i < 3; ++i) CHECK(gx[i] == up[i]);
  }
}

TEST_CASE("sgd_step") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("w", std::vector<std::size_t>{2});
  ParamVector theta(layout), g(layout);
  theta[0] = 1.0;
  theta[1] = 2.0;
  g[0] = 1.0;
  g[1] = -1.0;

  SECTION("lr=0 leaves parameters unchanged") {
    auto out = sgd_step(theta, g, 0.0);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 2.0);
  }
  SECTION("direct arithmetic") {
    auto out = sgd_step(theta, g, 0.5);
    CHECK(out[0] == 0.5);
    CHECK(out[1] == 2.5);
  }
  SECTION("two half steps on a constant gradient equal one full step") {
    auto one = sgd_step(theta, g, 0.5);
    auto two = sgd_step(sgd_step(theta, g, 0.25), g, 0.25);
    CHECK(max_abs_diff(one, two) < 1e-15);
  }
}

TEST_CASE("adam_step") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("w", std::vector<std::size_t>{1});

  SECTION("zero gradient at step 1 leaves theta unchanged") {
    ParamVector theta(layout), g(layout);
    theta[0] = 3.25;
    AdamState st(layout);
    adam_step(st, theta, g, {});
    CHECK(theta[0] == 3.25);
  }

  SECTION("matches scalar hand evaluation for two constant-gradient steps") {
    ParamVector theta(layout), g(layout);
    theta[0] = 1.0;
    g[0] = 0.5;
    AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
    AdamState st(layout);
    adam_step(st, theta, g, cfg);
    adam_step(st, theta, g, cfg);

    double m = 0.0, v = 0.0, th = 1.0;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * 0.5;
      v = 0.999 * v + 0.001 * 0.25;
      const double mhat = m / (1.0 - std::pow(0.9, t));
      const double vhat = v / (1.0 - std::pow(0.999, t));
      th -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    CHECK(theta[0] == Catch::Approx(th).margin(1e-15));
  }

  SECTION("beta1=0 makes the first moment equal the gradient") {
    ParamVector theta(layout), g(layout);
    g[0] = -2.5;
    AdamConfig cfg{0.01, 0.0, 0.999, 1e-8};
    AdamState st(layout);
    adam_step(st, theta, g, cfg);
    CHECK(st.m[0] == -2.5);
  }
}

TEST_CASE("init_params") {
  ModelConfig cfg;
  cfg.k = 4;
  cfg.hidden = 6;
  cfg.head_layers = {5};
  Forecaster model(cfg);

  SECTION("same seed gives bitwise-equal vectors") {
    auto a = model.init(99), b = model.init(99);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
  SECTION("biases are zero and weights stay inside the fan-in bound") {
    auto theta = model.init(123);
    const auto& layout = *model.layout();
    for (std::size_t e = 0; e < layout.entry_count(); ++e) {
      const auto& entry = layout.entry(e);
      auto s = theta.slice(e);
      if (entry.shape.size() == 1) {
        for (double v : s) CHECK(v == 0.0);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(entry.shape[1]));
        for (double v : s) {
          CHECK(v > -bound);
          CHECK(v < bound);
        }
      }
    }
  }
}

TEST_CASE("param vector arithmetic") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("a", std::vector<std::size_t>{2});
  ParamVector v(layout);
  v[0] = 3.0;
  v[1] = 4.0;

  CHECK(l2_norm_sq(v) == 25.0);

  auto zero = scale(v, 0.0);
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  auto b = testutil::random_params(layout, 2);
  auto roundtrip = add(sub(v, b), b);
  CHECK(max_abs_diff(roundtrip, v) < 1e-12);

  SECTION("incompatible layouts are rejected") {
    auto other = std::make_shared<ParamLayout>();
    other->add("b", std::vector<std::size_t>{3});
    ParamVector w(other);
    CHECK_THROWS_AS(add(v, w), ContractError);
  }
}
