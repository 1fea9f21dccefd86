#pragma once

#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "driftcast/model.hpp"
#include "driftcast/rng.hpp"

namespace driftcast {

// A spatial task: all samples whose windows fall in one zone.
struct Task {
  int id = -1;
  std::string name;
  std::vector<Sample> samples;
};

struct MetaConfig {
  double inner_lr = 1e-2;   // alpha
  int inner_steps = 5;      // S
  double meta_step = 0.1;   // beta
  int iterations = 1000;    // I
  int task_batch = 5;
  std::size_t support_size = 10;
  std::size_t query_size = 20;
  uint64_t seed = 0;
  int val_every = 50;
  // keep the iterate with the best held-out post-adaptation loss (the same
  // checkpoint-selection rule the offline baseline gets from its val split)
  bool select_best_by_val = false;
};

struct Episode {
  std::vector<const Sample*> support, query;
};

using SampleRefs = std::vector<const Sample*>;

inline SampleRefs make_refs(const std::vector<Sample>& samples) {
  SampleRefs refs;
  refs.reserve(samples.size());
  for (const auto& s : samples) refs.push_back(&s);
  return refs;
}

// Disjoint uniform draws without replacement: a partial Fisher-Yates pass
// over the index range, deterministic for a given rng state.
inline Episode sample_episode(const Task& task, std::size_t support_size,
                              std::size_t query_size, Rng& rng) {
  const std::size_t need = support_size + query_size;
  if (task.samples.size() < need)
    throw ContractError("sample_episode: task '" + task.name + "' has " +
                        std::to_string(task.samples.size()) + " samples, needs " +
                        std::to_string(need));
  std::vector<std::size_t> idx(task.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < need; ++i) {
    const std::size_t j = i + rng.uniform_int(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  Episode ep;
  for (std::size_t i = 0; i < support_size; ++i) ep.support.push_back(&task.samples[idx[i]]);
  for (std::size_t i = 0; i < query_size; ++i)
    ep.query.push_back(&task.samples[idx[support_size + i]]);
  return ep;
}

// S full-batch SGD steps on the mean joint loss over the support set.
inline ParamVector inner_adapt(const Forecaster& model, const ParamVector& theta,
                               std::span<const Sample* const> support, double lr, int steps) {
  ParamVector cur = theta;
  GradVector grad(model.layout());
  for (int s = 0; s < steps; ++s) {
    model.grad_joint_batch(cur, support, grad);
    axpy(cur, -lr, grad);
  }
  return cur;
}

// theta' = theta + beta * mean_over_batch(theta_adapted - theta)
inline ParamVector reptile_iteration(const Forecaster& model, const ParamVector& theta,
                                     std::span<const Task* const> batch, const MetaConfig& cfg,
                                     Rng& rng, double* query_loss = nullptr) {
  if (batch.empty()) throw ContractError("reptile_iteration: empty task batch");
  ParamVector delta_sum(theta.layout());
  double qloss = 0.0;
  for (const Task* task : batch) {
    Episode ep = sample_episode(*task, cfg.support_size, cfg.query_size, rng);
    ParamVector adapted = inner_adapt(model, theta, ep.support, cfg.inner_lr, cfg.inner_steps);
    if (query_loss) qloss += model.mean_loss(adapted, ep.query);
    axpy(delta_sum, 1.0, adapted);
    axpy(delta_sum, -1.0, theta);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  ParamVector out = theta;
  axpy(out, cfg.meta_step * inv, delta_sum);
  if (query_loss) *query_loss = qloss * inv;
  return out;
}

// Observer for tests: sees where the query gradient was evaluated.
using FomamlHook =
    std::function<void(int task_id, const ParamVector& theta_adapted, const GradVector& query_grad)>;

// First-order MAML: adapt on support, take the query-loss gradient at the
// adapted parameters, and apply its batch mean to theta directly.
inline ParamVector fomaml_iteration(const Forecaster& model, const ParamVector& theta,
                                    std::span<const Task* const> batch, const MetaConfig& cfg,
                                    Rng& rng, double* query_loss = nullptr,
                                    const FomamlHook& hook = nullptr) {
  if (batch.empty()) throw ContractError("fomaml_iteration: empty task batch");
  GradVector grad_sum(theta.layout());
  GradVector grad(model.layout());
  double qloss = 0.0;
  for (const Task* task : batch) {
    Episode ep = sample_episode(*task, cfg.support_size, cfg.query_size, rng);
    ParamVector adapted = inner_adapt(model, theta, ep.support, cfg.inner_lr, cfg.inner_steps);
    qloss += model.grad_joint_batch(adapted, ep.query, grad);
    if (hook) hook(task->id, adapted, grad);
    axpy(grad_sum, 1.0, grad);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  ParamVector out = theta;
  axpy(out, -cfg.meta_step * inv, grad_sum);
  if (query_loss) *query_loss = qloss * inv;
  return out;
}

enum class MetaAlgo { Reptile, Fomaml };

struct MetaResult {
  ParamVector theta_star;
  std::vector<double> query_loss_history;           // one entry per iteration
  std::vector<std::pair<int, double>> val_history;  // (iteration, held-out loss)
};

inline double evaluate_tasks(const Forecaster& model, const ParamVector& theta,
                             std::span<const Task* const> tasks, const MetaConfig& cfg, Rng& rng) {
  double total = 0.0;
  for (const Task* task : tasks) {
    Episode ep = sample_episode(*task, cfg.support_size, cfg.query_size, rng);
    ParamVector adapted = inner_adapt(model, theta, ep.support, cfg.inner_lr, cfg.inner_steps);
    total += model.mean_loss(adapted, ep.query);
  }
  return total / static_cast<double>(tasks.size());
}

// Meta-training driver. Task batches are drawn without replacement per
// iteration; the query-loss history is evaluation-only.
inline MetaResult meta_train(const Forecaster& model, const ParamVector& theta0,
                             std::span<const Task> tasks, const MetaConfig& cfg,
                             MetaAlgo algo = MetaAlgo::Reptile,
                             std::span<const Task> val_tasks = {}) {
  if (tasks.empty()) throw ContractError("meta_train: empty task set");
  MetaResult res{theta0, {}, {}};
  Rng rng(derive_seed(cfg.seed, {0x6d657461ULL}));  // "meta"

  std::vector<const Task*> all;
  for (const Task& t : tasks) all.push_back(&t);
  std::vector<const Task*> val;
  for (const Task& t : val_tasks) val.push_back(&t);

  const std::size_t batch_size = std::min<std::size_t>(cfg.task_batch, all.size());
  double best_val = std::numeric_limits<double>::infinity();
  ParamVector best_theta = theta0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    // partial shuffle picks the batch without replacement
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t j = i + rng.uniform_int(all.size() - i);
      std::swap(all[i], all[j]);
    }
    std::span<const Task* const> batch(all.data(), batch_size);
    double qloss = 0.0;
    res.theta_star = (algo == MetaAlgo::Reptile)
                         ? reptile_iteration(model, res.theta_star, batch, cfg, rng, &qloss)
                         : fomaml_iteration(model, res.theta_star, batch, cfg, rng, &qloss);
    res.query_loss_history.push_back(qloss);
    if (!val.empty() && cfg.val_every > 0 && (iter + 1) % cfg.val_every == 0) {
      const double v = evaluate_tasks(model, res.theta_star, val, cfg, rng);
      res.val_history.emplace_back(iter + 1, v);
      if (cfg.select_best_by_val && v < best_val) {
        best_val = v;
        best_theta = res.theta_star;
      }
    }
  }
  if (cfg.select_best_by_val && std::isfinite(best_val)) res.theta_star = best_theta;
  return res;
}

}  // namespace driftcast
