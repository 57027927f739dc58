#include "htlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

namespace htlab {

void SgdConfig::validate() const {
  // lr == 0 is allowed: it turns training into a fixed point, which tests use.
  if (!(lr >= 0.0)) throw ValidationError("SgdConfig: lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("SgdConfig: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("SgdConfig: weight_decay must be >= 0");
  if (batch_size == 0) throw ValidationError("SgdConfig: batch_size must be >= 1");
}

void LolConfig::validate() const {
  if (num_subsets == 0) throw ValidationError("LolConfig: num_subsets must be >= 1");
  if (local_budget && !(*local_budget > 0.0)) throw ValidationError("LolConfig: local_budget must be > 0");
  if (!(outer_step > 0.0 && outer_step <= 1.0))
    throw ValidationError("LolConfig: outer_step must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// SGD

void sgd_step(ModelParams& params, const Gradients& grads, MomentumState& state,
              const SgdConfig& cfg, const FreezeMask& mask) {
  if (!state.velocity) state.velocity = params.zeros_like();
  auto p = params.tensors();
  const auto g = grads.tensors();
  auto v = state.velocity->tensors();
  if (g.size() != p.size() || v.size() != p.size())
    throw ValidationError("sgd_step: gradient layout mismatch");
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t].group == Group::bn_stats || !mask.is_trainable(p[t].group)) continue;
    auto& pv = p[t].values;
    const auto& gv = g[t].values;
    auto& vv = v[t].values;
    const double wd = p[t].decays ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double step = gv[i];
      if (wd != 0.0) step += wd * pv[i];
      vv[i] = cfg.momentum * vv[i] + step;
      pv[i] -= cfg.lr * vv[i];
    }
  }
}

BatchGradients compute_batch_gradients(const ModelParams& params, const Matrix& x,
                                       const std::vector<std::size_t>& y, const Objective& obj,
                                       const FreezeMask& mask) {
  BatchGradients out;
  out.trace = forward(params, x, Mode::train);
  const LossTerm ce = cross_entropy(out.trace.logits, y);

  std::optional<LossTerm> distill;
  if (obj.loss.lambda_distill != 0.0) {
    if (!obj.teacher) throw ValidationError("distillation requires a teacher model");
    const auto teacher = forward(*obj.teacher, x, Mode::eval);
    distill = selective_distill(teacher.logits, out.trace.logits, obj.seen_mask);
  }
  std::optional<LossTerm> rank;
  if (obj.loss.lambda_rank != 0.0 && x.rows() >= 2) rank = rank_reg(out.trace.features);

  auto composed = compose(ce, distill ? &*distill : nullptr, rank ? &*rank : nullptr, obj.loss);
  out.loss = composed.breakdown;
  const Matrix* gf = composed.grad_features ? &*composed.grad_features : nullptr;
  out.grads = backward(params, out.trace, composed.grad_logits, gf, mask);
  return out;
}

LossBreakdown train_step(ModelParams& params, MomentumState& state, const Matrix& x,
                         const std::vector<std::size_t>& y, const Objective& obj,
                         const SgdConfig& cfg, const FreezeMask& mask) {
  auto bg = compute_batch_gradients(params, x, y, obj, mask);
  if (params.spec.use_batchnorm && mask.is_trainable(Group::bn_stats))
    update_running_stats(params, bg.trace);
  sgd_step(params, bg.grads, state, cfg, mask);
  return bg.loss;
}

namespace {

void check_training_args(const Dataset& data, const SgdConfig& cfg, const FreezeMask& mask) {
  cfg.validate();
  if (data.empty()) throw ValidationError("training set is empty");
  if (!mask.any_trainable()) throw ValidationError("every parameter group is frozen");
}

struct Batch {
  Matrix x;
  std::vector<std::size_t> y;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> ids) {
  Batch b{gather_rows(data.x, ids), {}};
  b.y.reserve(ids.size());
  for (auto i : ids) b.y.push_back(data.y[i]);
  return b;
}

}  // namespace

TrainCurve train_sgd(ModelParams& params, const Dataset& data, const Objective& obj,
                     const SgdConfig& cfg, const FreezeMask& mask, const Rng& rng,
                     const TrainHooks& hooks) {
  TrainCurve curve;
  if (cfg.epochs == 0) return curve;
  check_training_args(data, cfg, mask);
  MomentumState state;
  const std::size_t n = data.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng = rng.derive(epoch);
    const auto order = erng.permutation(n);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      auto b = make_batch(data, std::span(order).subspan(start, stop - start));
      loss_sum += train_step(params, state, b.x, b.y, obj, cfg, mask).total;
      ++steps;
      if (hooks.on_step) hooks.on_step(epoch, params);
    }
    curve.minibatches += steps;
    curve.epoch_loss.push_back(loss_sum / static_cast<double>(steps));
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, params);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// LOLSGD

std::size_t LolRoundPlan::minibatches() const {
  std::size_t n = 0;
  for (const auto& s : subsets) n += s.steps;
  return n;
}

LolRoundPlan plan_lol_round(const Dataset& data, const SgdConfig& sgd, const LolConfig& lol,
                            const Rng& rng, std::size_t round) {
  lol.validate();
  sgd.validate();
  std::vector<std::size_t> classes;
  {
    std::vector<bool> present(data.num_classes, false);
    for (auto label : data.y) present[label] = true;
    for (std::size_t c = 0; c < present.size(); ++c)
      if (present[c]) classes.push_back(c);
  }
  if (lol.leave_k >= classes.size())
    throw ValidationError("LOLSGD: leave_k=" + std::to_string(lol.leave_k) + " must be < " +
                          std::to_string(classes.size()) + " distinct classes");
  const double budget = lol.local_budget.value_or(1.0 / static_cast<double>(lol.num_subsets));
  LolRoundPlan plan;
  plan.round = round;
  const Rng rrng = rng.derive(round);
  for (std::size_t m = 0; m < lol.num_subsets; ++m) {
    Rng srng = rrng.derive(m);
    LolSubset sub;
    std::vector<bool> keep(data.num_classes, false);
    for (auto c : classes) keep[c] = true;
    for (auto i : srng.sample_without_replacement(classes.size(), lol.leave_k)) {
      sub.dropped_classes.push_back(classes[i]);
      keep[classes[i]] = false;
    }
    std::ranges::sort(sub.dropped_classes);
    sub.retained = data.indices_with_labels(keep);
    if (lol.local_steps > 0) {
      sub.steps = lol.local_steps;
    } else {
      const double want = budget * static_cast<double>(sub.retained.size()) /
                          static_cast<double>(sgd.batch_size);
      sub.steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(want - 1e-12)));
    }
    plan.subsets.push_back(std::move(sub));
  }
  return plan;
}

namespace {

struct LocalRun {
  ModelParams params;
  std::vector<std::vector<std::size_t>> batches;
  double loss_sum = 0.0;
};

LocalRun run_local(const ModelParams& snapshot, const Dataset& data, const Objective& obj,
                   const SgdConfig& sgd, const FreezeMask& mask, const LolSubset& sub, Rng rng,
                   const TrainHooks* hooks, std::size_t epoch) {
  LocalRun out{snapshot, {}, 0.0};
  MomentumState state;
  const std::size_t take = std::min(sgd.batch_size, sub.retained.size());
  for (std::size_t s = 0; s < sub.steps; ++s) {
    // Each local minibatch is the head of a fresh permutation of the subset.
    auto perm = rng.permutation(sub.retained.size());
    std::vector<std::size_t> ids(take);
    for (std::size_t i = 0; i < take; ++i) ids[i] = sub.retained[perm[i]];
    auto b = make_batch(data, ids);
    out.loss_sum += train_step(out.params, state, b.x, b.y, obj, sgd, mask).total;
    if (hooks && hooks->on_step) hooks->on_step(epoch, out.params);
    out.batches.push_back(std::move(ids));
  }
  return out;
}

LolRoundInfo execute_round(ModelParams& params, const Dataset& data, const Objective& obj,
                           const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                           const Rng& rng, const LolRoundPlan& plan, const TrainHooks* hooks,
                           std::size_t epoch) {
  if (plan.subsets.empty()) throw ValidationError("LOLSGD: empty round plan");
  const std::size_t m_count = plan.subsets.size();
  const Rng rrng = rng.derive(plan.round);
  std::vector<std::optional<LocalRun>> runs(m_count);

  // Hooks observe intermediate states, so they force sequential execution.
  const std::size_t jobs = hooks ? 1 : std::max<std::size_t>(1, std::min(lol.jobs, m_count));
  auto work = [&](std::size_t m) {
    // Stream 1 of the subset's rng drives minibatch sampling; stream 0 chose
    // the dropped classes.
    runs[m] = run_local(params, data, obj, sgd, mask, plan.subsets[m], rrng.derive(m).derive(1),
                        hooks, epoch);
  };
  if (jobs == 1) {
    for (std::size_t m = 0; m < m_count; ++m) work(m);
  } else {
    std::vector<std::exception_ptr> errors(jobs);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t m = w; m < m_count; m += jobs) work(m);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  LolRoundInfo info;
  double loss_sum = 0.0;
  auto theta = params.tensors();
  std::vector<std::vector<ConstTensorRef>> local;
  local.reserve(m_count);
  for (auto& r : runs) {
    local.push_back(std::as_const(r->params).tensors());
    info.minibatches += r->batches.size();
    loss_sum += r->loss_sum;
  }
  const double inv_m = 1.0 / static_cast<double>(m_count);
  for (std::size_t t = 0; t < theta.size(); ++t) {
    auto& dst = theta[t].values;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double acc = 0.0;
      for (std::size_t m = 0; m < m_count; ++m) acc += dst[i] - local[m][t].values[i];
      dst[i] -= lol.outer_step * (acc * inv_m);
    }
  }
  for (auto& layer : params.hidden)
    if (layer.bn)
      for (double& v : layer.bn->running_var) v = std::max(v, 0.0);
  for (auto& r : runs) info.batches.push_back(std::move(r->batches));
  info.mean_loss = info.minibatches ? loss_sum / static_cast<double>(info.minibatches) : 0.0;
  return info;
}

}  // namespace

LolRoundInfo lolsgd_round(ModelParams& params, const Dataset& data, const Objective& obj,
                          const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                          const Rng& rng, const LolRoundPlan& plan) {
  check_training_args(data, sgd, mask);
  lol.validate();
  return execute_round(params, data, obj, sgd, lol, mask, rng, plan, nullptr, 0);
}

LolRoundInfo lolsgd_round(ModelParams& params, const Dataset& data, const Objective& obj,
                          const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                          const Rng& rng, std::size_t round) {
  check_training_args(data, sgd, mask);
  return lolsgd_round(params, data, obj, sgd, lol, mask, rng,
                      plan_lol_round(data, sgd, lol, rng, round));
}

TrainCurve train_lolsgd(ModelParams& params, const Dataset& data, const Objective& obj,
                        const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                        const Rng& rng, const TrainHooks& hooks) {
  TrainCurve curve;
  if (sgd.epochs == 0) return curve;
  check_training_args(data, sgd, mask);
  lol.validate();
  const std::size_t per_epoch = (data.size() + sgd.batch_size - 1) / sgd.batch_size;
  const TrainHooks* step_hooks = hooks.on_step ? &hooks : nullptr;
  std::size_t round = 0;
  double last_loss = 0.0;
  for (std::size_t epoch = 1; epoch <= sgd.epochs; ++epoch) {
    const double target = static_cast<double>(epoch * per_epoch);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (;;) {
      auto plan = plan_lol_round(data, sgd, lol, rng, round);
      const auto cost = plan.minibatches();
      if (static_cast<double>(curve.minibatches) + 0.5 * static_cast<double>(cost) >= target) break;
      auto info = execute_round(params, data, obj, sgd, lol, mask, rng, plan, step_hooks, epoch);
      curve.minibatches += info.minibatches;
      loss_sum += info.mean_loss * static_cast<double>(info.minibatches);
      steps += info.minibatches;
      ++round;
    }
    if (steps > 0) last_loss = loss_sum / static_cast<double>(steps);
    curve.epoch_loss.push_back(last_loss);
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, params);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// SWA

void SwaAccumulator::add(const ModelParams& params) {
  if (!avg_) {
    avg_ = params;
    count_ = 1;
    return;
  }
  const double n = static_cast<double>(count_);
  avg_ = params_axpy(n / (n + 1.0), *avg_, 1.0 / (n + 1.0), params);
  ++count_;
}

const ModelParams& SwaAccumulator::average() const {
  if (!avg_) throw ValidationError("SWA: no checkpoints averaged");
  return *avg_;
}

ModelParams swa_average(std::span<const TimedCheckpoint> stream, const SwaConfig& cfg) {
  SwaAccumulator acc;
  for (const auto& c : stream) {
    if (c.epoch <= cfg.start_epoch) continue;
    if (cfg.cadence == SwaCadence::per_epoch && !c.epoch_end) continue;
    acc.add(c.params);
  }
  if (acc.count() == 0) throw ValidationError("SWA: empty checkpoint stream");
  return acc.average();
}

}  // namespace htlab
