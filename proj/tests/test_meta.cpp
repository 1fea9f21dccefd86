#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "driftcast/meta.hpp"
#include "test_util.hpp"

using namespace driftcast;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.k = 4;
  cfg.horizon = 2;
  cfg.hidden = 6;
  cfg.head_layers = {6};
  cfg.n_beams = 8;
  cfg.s_pos = 10.0;  // keeps full-batch SGD at the default rates stable
  return cfg;
}

Task random_task(const ModelConfig& cfg, int id, std::size_t n, uint64_t seed) {
  Task t;
  t.id = id;
  t.name = "task" + std::to_string(id);
  for (std::size_t i = 0; i < n; ++i)
    t.samples.push_back(testutil::random_sample(cfg, seed + 31 * i));
  return t;
}

// Curved noisy motion with a per-task turn rate; targets follow the arc.
Task arc_task(const ModelConfig& cfg, int id, double omega, std::size_t n, uint64_t seed) {
  Task t;
  t.id = id;
  t.name = "arc" + std::to_string(id);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    Vec2 p{rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0)};
    double heading = rng.uniform(-M_PI, M_PI);
    const double speed = 2.0;
    for (std::size_t j = 0; j < cfg.k; ++j) {
      Observation o;
      o.t = static_cast<double>(j);
      o.p = p;
      o.rsrp = -90.0;
      o.beam = 3;
      o.speed = speed;
      o.heading = heading;
      s.window.push_back(o);
      p = p + Vec2{std::cos(heading), std::sin(heading)} * speed;
      heading = wrap_angle(heading + omega + rng.normal(0.0, 0.02));
    }
    for (std::size_t tau = 0; tau < cfg.horizon; ++tau) {
      s.target_pos.push_back(p);
      s.target_ho.push_back(0);
      p = p + Vec2{std::cos(heading), std::sin(heading)} * speed;
      heading = wrap_angle(heading + omega + rng.normal(0.0, 0.02));
    }
    t.samples.push_back(s);
  }
  return t;
}

}  // namespace

TEST_CASE("sample_episode draws disjoint support and query sets") {
  auto cfg = tiny_config();
  auto task = random_task(cfg, 0, 30, 5);

  Rng rng(9);
  auto ep = sample_episode(task, 10, 20, rng);
  REQUIRE(ep.support.size() == 10);
  REQUIRE(ep.query.size() == 20);
  std::set<const Sample*> seen(ep.support.begin(), ep.support.end());
  for (const Sample* q : ep.query) CHECK(seen.insert(q).second);

  SECTION("same rng state reproduces the episode") {
    Rng r1(42), r2(42);
    auto a = sample_episode(task, 10, 20, r1);
    auto b = sample_episode(task, 10, 20, r2);
    CHECK(a.support == b.support);
    CHECK(a.query == b.query);
  }

  SECTION("too-small task is rejected") {
    auto small = random_task(cfg, 1, 29, 6);
    Rng r(1);
    CHECK_THROWS_AS(sample_episode(small, 10, 20, r), ContractError);
  }

  SECTION("no leakage over many draws") {
    Rng r(77);
    for (int rep = 0; rep < 50; ++rep) {
      auto e = sample_episode(task, 7, 11, r);
      std::set<const Sample*> sup(e.support.begin(), e.support.end());
      CHECK(sup.size() == 7);
      for (const Sample* q : e.query) CHECK(!sup.count(q));
    }
  }
}

TEST_CASE("inner_adapt") {
  auto cfg = tiny_config();
  Forecaster model(cfg);
  auto theta = model.init(3);
  auto task = random_task(cfg, 0, 12, 21);
  auto support = make_refs(task.samples);

  SECTION("zero steps or zero rate leave theta unchanged") {
    CHECK(max_abs_diff(inner_adapt(model, theta, support, 0.01, 0), theta) == 0.0);
    CHECK(max_abs_diff(inner_adapt(model, theta, support, 0.0, 3), theta) == 0.0);
  }

  SECTION("two steps equal manual composition of grad + sgd_step") {
    auto adapted = inner_adapt(model, theta, support, 0.01, 2);
    GradVector g(model.layout());
    model.grad_joint_batch(theta, support, g);
    auto step1 = sgd_step(theta, g, 0.01);
    model.grad_joint_batch(step1, support, g);
    auto step2 = sgd_step(step1, g, 0.01);
    CHECK(max_abs_diff(adapted, step2) < 1e-15);
  }
}

TEST_CASE("reptile_iteration") {
  auto cfg = tiny_config();
  Forecaster model(cfg);
  auto theta = model.init(11);

  MetaConfig mc;
  mc.support_size = 5;
  mc.query_size = 5;

  SECTION("beta=0 leaves theta unchanged") {
    auto task = random_task(cfg, 0, 12, 33);
    const Task* batch[] = {&task};
    Rng rng(1);
    auto m2 = mc;
    m2.meta_step = 0.0;
    auto out = reptile_iteration(model, theta, batch, m2, rng);
    CHECK(max_abs_diff(out, theta) == 0.0);
  }

  SECTION("S=1 single task reduces to SGD with rate alpha*beta") {
    auto task = random_task(cfg, 0, 12, 33);
    const Task* batch[] = {&task};
    auto m2 = mc;
    m2.inner_steps = 1;
    m2.inner_lr = 0.02;
    m2.meta_step = 0.25;

    Rng rng(7);
    auto out = reptile_iteration(model, theta, batch, m2, rng);

    // replay the same episode draw to find the support set
    Rng rng2(7);
    auto ep = sample_episode(task, m2.support_size, m2.query_size, rng2);
    GradVector g(model.layout());
    model.grad_joint_batch(theta, ep.support, g);
    auto expect = sgd_step(theta, g, m2.inner_lr * m2.meta_step);
    CHECK(max_abs_diff(out, expect) < 1e-12);
  }

  SECTION("opposite adapted deltas cancel") {
    // two tasks of identical samples, targets mirrored about the prediction:
    // the support gradients negate exactly, so the deltas are v and -v
    auto c2 = cfg;
    c2.lambda_ho = 0.0;
    Forecaster m2(c2);
    auto th = m2.init(19);
    Sample base = testutil::random_sample(c2, 50);
    auto pred = m2.forward(th, base.window).pred_pos;
    Sample mirror = base;
    for (std::size_t tau = 0; tau < c2.horizon; ++tau)
      mirror.target_pos[tau] = pred[tau] * 2.0 - base.target_pos[tau];

    Task ta, tb;
    ta.id = 0;
    tb.id = 1;
    for (int i = 0; i < 10; ++i) {
      ta.samples.push_back(base);
      tb.samples.push_back(mirror);
    }
    const Task* batch[] = {&ta, &tb};
    MetaConfig m3;
    m3.support_size = 4;
    m3.query_size = 4;
    m3.inner_steps = 1;
    Rng rng(3);
    auto out = reptile_iteration(m2, th, batch, m3, rng);
    CHECK(max_abs_diff(out, th) < 1e-12);
  }
}

TEST_CASE("fomaml_iteration") {
  auto cfg = tiny_config();
  Forecaster model(cfg);
  auto theta = model.init(4);
  auto task = random_task(cfg, 0, 16, 44);
  const Task* batch[] = {&task};

  MetaConfig mc;
  mc.support_size = 5;
  mc.query_size = 6;

  SECTION("beta=0 leaves theta unchanged") {
    auto m2 = mc;
    m2.meta_step = 0.0;
    Rng rng(2);
    CHECK(max_abs_diff(fomaml_iteration(model, theta, batch, m2, rng), theta) == 0.0);
  }

  SECTION("S=0 is plain SGD on the query loss at theta") {
    auto m2 = mc;
    m2.inner_steps = 0;
    m2.meta_step = 0.1;
    Rng rng(6);
    auto out = fomaml_iteration(model, theta, batch, m2, rng);

    Rng rng2(6);
    auto ep = sample_episode(task, m2.support_size, m2.query_size, rng2);
    GradVector g(model.layout());
    model.grad_joint_batch(theta, ep.query, g);
    CHECK(max_abs_diff(out, sgd_step(theta, g, m2.meta_step)) < 1e-15);
  }

  SECTION("query gradient is evaluated at the adapted parameters") {
    bool checked = false;
    auto hook = [&](int, const ParamVector& adapted, const GradVector& qgrad) {
      CHECK(max_abs_diff(adapted, theta) > 0.0);
      // replaying the draw recovers the same episode, so the gradient at the
      // adapted point must match what the iteration used
      Rng rng2(8);
      auto ep = sample_episode(task, mc.support_size, mc.query_size, rng2);
      GradVector expect(model.layout());
      model.grad_joint_batch(adapted, ep.query, expect);
      CHECK(max_abs_diff(expect, qgrad) == 0.0);
      checked = true;
    };
    Rng rng(8);
    fomaml_iteration(model, theta, batch, mc, rng, nullptr, hook);
    CHECK(checked);
  }
}

TEST_CASE("meta_train") {
  auto cfg = tiny_config();
  Forecaster model(cfg);
  auto theta0 = model.init(1);

  std::vector<Task> tasks;
  const double omegas[5] = {-0.3, -0.15, 0.0, 0.15, 0.3};
  for (int i = 0; i < 5; ++i) tasks.push_back(arc_task(cfg, i, omegas[i], 40, 100 + i));

  MetaConfig mc;
  mc.iterations = 25;
  mc.task_batch = 3;
  mc.support_size = 10;
  mc.query_size = 20;
  mc.seed = 5;

  SECTION("zero iterations return theta0") {
    auto m2 = mc;
    m2.iterations = 0;
    auto res = meta_train(model, theta0, tasks, m2);
    CHECK(max_abs_diff(res.theta_star, theta0) == 0.0);
    CHECK(res.query_loss_history.empty());
  }

  SECTION("fixed seed is bitwise deterministic") {
    auto a = meta_train(model, theta0, tasks, mc);
    auto b = meta_train(model, theta0, tasks, mc);
    CHECK(max_abs_diff(a.theta_star, b.theta_star) == 0.0);
    CHECK(a.query_loss_history == b.query_loss_history);
  }

  SECTION("query loss improves on the arc benchmark") {
    auto m2 = mc;
    m2.iterations = 100;
    auto res = meta_train(model, theta0, tasks, m2);
    REQUIRE(res.query_loss_history.size() == 100);
    CHECK(res.query_loss_history.back() < res.query_loss_history.front());
    CHECK(same_layout(res.theta_star.layout(), theta0.layout()));
  }

  SECTION("empty task set is rejected") {
    std::vector<Task> none;
    CHECK_THROWS_AS(meta_train(model, theta0, none, mc), ContractError);
  }

  SECTION("val history is recorded on schedule") {
    auto m2 = mc;
    m2.iterations = 10;
    m2.val_every = 5;
    std::vector<Task> val{arc_task(cfg, 9, 0.1, 40, 500)};
    auto res = meta_train(model, theta0, tasks, m2, MetaAlgo::Reptile, val);
    REQUIRE(res.val_history.size() == 2);
    CHECK(res.val_history[0].first == 5);
    CHECK(res.val_history[1].first == 10);
  }
}
