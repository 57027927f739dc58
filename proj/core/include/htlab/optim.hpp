// Minibatch SGD with momentum, Leave-Out Local SGD and tail weight averaging.

#pragma once

#include "htlab/data.hpp"
#include "htlab/losses.hpp"
#include "htlab/model.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace htlab {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;

  void validate() const;
};

struct LolConfig {
  /// Number of leave-out subsets (local runs) per round.
  std::size_t num_subsets = 10;
  /// Classes dropped from each subset.
  std::size_t leave_k = 3;
  /// Fraction of an epoch (of the retained subset) per local run; 1/M when
  /// unset.
  std::optional<double> local_budget;
  /// When nonzero, overrides local_budget with an exact step count.
  std::size_t local_steps = 0;
  double outer_step = 1.0;
  /// Worker threads for the independent local runs of a round.
  std::size_t jobs = 1;

  void validate() const;
};

enum class SwaCadence { per_epoch, per_iteration };

struct SwaConfig {
  /// Checkpoints taken during epochs > start_epoch (1-based) are averaged.
  std::size_t start_epoch = 0;
  SwaCadence cadence = SwaCadence::per_epoch;
};

/// What one training step minimises: cross-entropy plus the optional
/// distillation and rank terms.
struct Objective {
  LossSpec loss;
  /// Frozen source model that supplies distillation targets.
  const ModelParams* teacher = nullptr;
  std::vector<bool> seen_mask;
};

struct MomentumState {
  std::optional<ModelParams> velocity;
};

/// v <- momentum v + g + weight_decay p (decay on linear weights only);
/// p <- p - lr v. Frozen groups and BN statistics are untouched.
void sgd_step(ModelParams& params, const Gradients& grads, MomentumState& state,
              const SgdConfig& cfg, const FreezeMask& mask);

struct BatchGradients {
  Gradients grads;
  LossBreakdown loss;
  ForwardTrace trace;
};

/// Train-mode forward, objective, backward.
BatchGradients compute_batch_gradients(const ModelParams& params, const Matrix& x,
                                       const std::vector<std::size_t>& y, const Objective& obj,
                                       const FreezeMask& mask);

/// compute_batch_gradients, BN running-stat update (when bn_stats is
/// trainable), then sgd_step.
LossBreakdown train_step(ModelParams& params, MomentumState& state, const Matrix& x,
                         const std::vector<std::size_t>& y, const Objective& obj,
                         const SgdConfig& cfg, const FreezeMask& mask);

struct TrainHooks {
  /// Called after every optimiser step with the 1-based epoch.
  std::function<void(std::size_t epoch, const ModelParams&)> on_step;
  /// Called at the end of every epoch (1-based).
  std::function<void(std::size_t epoch, const ModelParams&)> on_epoch_end;
};

struct TrainCurve {
  /// Mean total loss per epoch.
  std::vector<double> epoch_loss;
  std::size_t minibatches = 0;
};

/// epochs x ceil(N / batch) steps; epoch e shuffles with rng.derive(e).
TrainCurve train_sgd(ModelParams& params, const Dataset& data, const Objective& obj,
                     const SgdConfig& cfg, const FreezeMask& mask, const Rng& rng,
                     const TrainHooks& hooks = {});

struct LolSubset {
  std::vector<std::size_t> dropped_classes;
  /// Row ids of the samples kept in this subset.
  std::vector<std::size_t> retained;
  std::size_t steps = 0;
};

struct LolRoundPlan {
  std::size_t round = 0;
  std::vector<LolSubset> subsets;

  std::size_t minibatches() const;
};

/// Subset m of round r drops leave_k distinct classes drawn with
/// rng.derive(r).derive(m) and runs ceil(budget * |retained| / batch) local
/// steps (at least one).
LolRoundPlan plan_lol_round(const Dataset& data, const SgdConfig& sgd, const LolConfig& lol,
                            const Rng& rng, std::size_t round);

struct LolRoundInfo {
  /// batches[m][s] = row ids used by step s of local run m.
  std::vector<std::vector<std::vector<std::size_t>>> batches;
  std::size_t minibatches = 0;
  double mean_loss = 0.0;
};

/// One outer step: every local run starts from the same snapshot with fresh
/// momentum, pseudo-gradients theta - theta_m are summed in ascending m and
/// theta <- theta - outer_step * mean.
LolRoundInfo lolsgd_round(ModelParams& params, const Dataset& data, const Objective& obj,
                          const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                          const Rng& rng, std::size_t round);
LolRoundInfo lolsgd_round(ModelParams& params, const Dataset& data, const Objective& obj,
                          const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                          const Rng& rng, const LolRoundPlan& plan);

/// Runs rounds until the cumulative minibatch count tracks what train_sgd
/// would spend for sgd.epochs epochs; a round is started only if it brings
/// the running total closer to the target. Hooks fire per local step and per
/// epoch.
TrainCurve train_lolsgd(ModelParams& params, const Dataset& data, const Objective& obj,
                        const SgdConfig& sgd, const LolConfig& lol, const FreezeMask& mask,
                        const Rng& rng, const TrainHooks& hooks = {});

/// Equal-weight running average built with params_axpy.
class SwaAccumulator {
 public:
  void add(const ModelParams& params);
  std::size_t count() const { return count_; }
  /// Throws ValidationError when nothing has been added.
  const ModelParams& average() const;

 private:
  std::optional<ModelParams> avg_;
  std::size_t count_ = 0;
};

struct TimedCheckpoint {
  /// 1-based epoch in which the checkpoint was taken.
  std::size_t epoch = 0;
  bool epoch_end = false;
  ModelParams params;
};

/// Averages the checkpoints with epoch > start_epoch; per_epoch cadence keeps
/// only epoch-end checkpoints (SWA), per_iteration keeps all (SWAD-lite).
ModelParams swa_average(std::span<const TimedCheckpoint> stream, const SwaConfig& cfg);

}  // namespace htlab
