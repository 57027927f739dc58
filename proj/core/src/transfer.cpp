#include "htlab/transfer.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

namespace htlab {

namespace {

struct KindName {
  ProtocolKind kind;
  std::string_view name;
};

constexpr std::array<KindName, 15> kKindNames{{
    {ProtocolKind::source_only, "source_only"},
    {ProtocolKind::naive_ft, "naive_ft"},
    {ProtocolKind::frozen_ft, "frozen_ft"},
    {ProtocolKind::lp_ft, "lp_ft"},
    {ProtocolKind::bn_affine_only, "bn_affine_only"},
    {ProtocolKind::bn_stats_only, "bn_stats_only"},
    {ProtocolKind::in_adapter_only, "in_adapter_only"},
    {ProtocolKind::sgd_distill, "sgd_distill"},
    {ProtocolKind::sgd_rank, "sgd_rank"},
    {ProtocolKind::lolsgd, "lolsgd"},
    {ProtocolKind::lolsgd_distill, "lolsgd_distill"},
    {ProtocolKind::lolsgd_rank, "lolsgd_rank"},
    {ProtocolKind::lolsgd_distill_rank, "lolsgd_distill_rank"},
    {ProtocolKind::swa, "swa"},
    {ProtocolKind::swad_lite, "swad_lite"},
}};

// Rng stream tags.
constexpr std::uint64_t kTagInit = 11;
constexpr std::uint64_t kTagSourceTrain = 12;
constexpr std::uint64_t kTagTransfer = 13;

}  // namespace

std::string_view to_string(ProtocolKind k) {
  for (const auto& kn : kKindNames)
    if (kn.kind == k) return kn.name;
  return "?";
}

ProtocolKind parse_protocol_kind(std::string_view s) {
  for (const auto& kn : kKindNames)
    if (kn.name == s) return kn.kind;
  throw ValidationError("unknown protocol '" + std::string(s) + "'");
}

const std::vector<ProtocolKind>& all_protocol_kinds() {
  static const std::vector<ProtocolKind> kinds = [] {
    std::vector<ProtocolKind> v;
    for (const auto& kn : kKindNames) v.push_back(kn.kind);
    return v;
  }();
  return kinds;
}

bool Protocol::uses_distill() const {
  return kind == ProtocolKind::sgd_distill || kind == ProtocolKind::lolsgd_distill ||
         kind == ProtocolKind::lolsgd_distill_rank;
}

bool Protocol::uses_rank() const {
  return kind == ProtocolKind::sgd_rank || kind == ProtocolKind::lolsgd_rank ||
         kind == ProtocolKind::lolsgd_distill_rank;
}

bool Protocol::uses_lolsgd() const {
  return kind == ProtocolKind::lolsgd || kind == ProtocolKind::lolsgd_distill ||
         kind == ProtocolKind::lolsgd_rank || kind == ProtocolKind::lolsgd_distill_rank;
}

LossSpec Protocol::effective_loss() const {
  LossSpec l = loss;
  if (!uses_distill()) l.lambda_distill = 0.0;
  if (!uses_rank()) l.lambda_rank = 0.0;
  return l;
}

void Protocol::validate(const MlpSpec& spec) const {
  loss.validate();
  sgd.validate();
  if (uses_distill() && !(loss.lambda_distill > 0.0))
    throw ValidationError(name() + " requires lambda_distill > 0");
  if (uses_rank() && !(loss.lambda_rank > 0.0))
    throw ValidationError(name() + " requires lambda_rank > 0");
  if (uses_lolsgd()) lol.validate();
  if ((kind == ProtocolKind::bn_affine_only || kind == ProtocolKind::bn_stats_only) &&
      !spec.use_batchnorm)
    throw ValidationError(name() + " requires a model with batch-norm layers");
  if (kind == ProtocolKind::in_adapter_only && !spec.use_in_adapter)
    throw ValidationError(name() + " requires a model with an IN-adapter");
  if ((kind == ProtocolKind::swa || kind == ProtocolKind::swad_lite) &&
      swa.start_epoch >= sgd.epochs)
    throw ValidationError(name() + ": swa start_epoch must be < epochs");
}

TargetTask target_task(const HTScenario& scenario, const ToxicityMap* toxicity) {
  return TargetTask{&scenario.target_train, &scenario.target_test, scenario.seen_mask, toxicity, 0};
}

ModelParams pretrain_source(const Dataset& source_train, const MlpSpec& spec, const SgdConfig& sgd,
                            std::uint64_t seed) {
  spec.validate();
  if (source_train.num_classes != spec.num_classes() || source_train.dim() != spec.input_dim())
    throw ValidationError("pretrain_source: model spec does not match the source data");
  const auto hist = source_train.class_histogram();
  if (std::ranges::find(hist, std::size_t{0}) != hist.end())
    throw ValidationError("pretrain_source: source data must cover every class");
  const Rng root(seed);
  Rng init_rng = root.derive(kTagInit);
  ModelParams params = init_model(spec, init_rng);
  Objective obj;
  train_sgd(params, source_train, obj, sgd, FreezeMask::all_trainable(), root.derive(kTagSourceTrain));
  return params;
}

ModelParams pretrain_source(const HTScenario& scenario, const MlpSpec& spec, const SgdConfig& sgd,
                            std::uint64_t seed) {
  return pretrain_source(scenario.source_train, spec, sgd, seed);
}

namespace {

FreezeMask mask_for(ProtocolKind kind) {
  switch (kind) {
    case ProtocolKind::naive_ft:
      return FreezeMask::all_trainable();
    case ProtocolKind::bn_affine_only:
      return FreezeMask::only({Group::bn_affine, Group::bn_stats});
    case ProtocolKind::in_adapter_only:
      return FreezeMask::only({Group::in_adapter});
    default:
      return FreezeMask::all_trainable().freeze(Group::classifier);
  }
}

}  // namespace

TransferRun run_protocol(const TargetTask& task, const ModelParams& source_params,
                         const Protocol& protocol, std::uint64_t seed, const RunOptions& opts) {
  if (!task.train || !task.test) throw ValidationError("run_protocol: incomplete target task");
  source_params.validate();
  protocol.validate(source_params.spec);
  if (task.seen_mask.size() != source_params.spec.num_classes())
    throw ValidationError("run_protocol: seen mask length != model classes");
  if (protocol.kind != ProtocolKind::source_only && protocol.kind != ProtocolKind::bn_stats_only &&
      protocol.sgd.epochs > 0 && task.train->empty())
    throw ValidationError("run_protocol: empty target training set");

  TransferRun run;
  run.scenario_id = opts.scenario_id;
  run.protocol = protocol;
  run.seed = seed;
  run.source_params = source_params;

  auto record = [&](const ModelParams& p) {
    for (const auto& t : p.tensors())
      if (!all_finite(t.values))
        throw std::runtime_error("training diverged: non-finite " + t.name + " after epoch " +
                                 std::to_string(run.curve.size() - 1));
    run.curve.push_back(evaluate(p, *task.test, task.seen_mask, task.toxicity, task.k_spectrum));
    if (opts.retain_checkpoints) run.checkpoints.push_back(p);
  };
  record(source_params);

  const std::size_t epochs = protocol.sgd.epochs;
  ModelParams params = source_params;
  Objective obj{protocol.effective_loss(), &source_params, task.seen_mask};
  const Rng rng = Rng(seed).derive(kTagTransfer);
  TrainHooks hooks;
  hooks.on_epoch_end = [&](std::size_t, const ModelParams& p) { record(p); };

  switch (protocol.kind) {
    case ProtocolKind::source_only:
      for (std::size_t e = 0; e < epochs; ++e) record(params);
      break;
    case ProtocolKind::bn_stats_only:
      params = recompute_bn_stats(params, *task.train);
      for (std::size_t e = 0; e < epochs; ++e) record(params);
      break;
    case ProtocolKind::lp_ft: {
      SgdConfig probe = protocol.sgd;
      probe.epochs = epochs / 2;
      SgdConfig finetune = protocol.sgd;
      finetune.epochs = epochs - probe.epochs;
      train_sgd(params, *task.train, obj, probe, FreezeMask::only({Group::classifier}), rng.derive(1),
                hooks);
      train_sgd(params, *task.train, obj, finetune, FreezeMask::all_trainable(), rng.derive(2), hooks);
      break;
    }
    case ProtocolKind::swa:
    case ProtocolKind::swad_lite: {
      SwaConfig swa = protocol.swa;
      swa.cadence = protocol.kind == ProtocolKind::swa ? SwaCadence::per_epoch
                                                       : SwaCadence::per_iteration;
      SwaAccumulator acc;
      TrainHooks swa_hooks;
      if (swa.cadence == SwaCadence::per_iteration) {
        swa_hooks.on_step = [&](std::size_t epoch, const ModelParams& p) {
          if (epoch > swa.start_epoch) acc.add(p);
        };
      }
      swa_hooks.on_epoch_end = [&](std::size_t epoch, const ModelParams& p) {
        if (swa.cadence == SwaCadence::per_epoch && epoch > swa.start_epoch) acc.add(p);
        record(acc.count() > 0 ? acc.average() : p);
      };
      train_sgd(params, *task.train, obj, protocol.sgd, mask_for(protocol.kind), rng, swa_hooks);
      if (acc.count() > 0) params = acc.average();
      break;
    }
    default:
      if (protocol.uses_lolsgd())
        train_lolsgd(params, *task.train, obj, protocol.sgd, protocol.lol, mask_for(protocol.kind),
                     rng, hooks);
      else
        train_sgd(params, *task.train, obj, protocol.sgd, mask_for(protocol.kind), rng, hooks);
      break;
  }
  run.final_params = std::move(params);
  return run;
}

ModelParams wise_merge(const ModelParams& source, const ModelParams& target, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("wise_merge: alpha must lie in [0, 1]");
  return params_axpy(alpha, source, 1.0 - alpha, target);
}

Matrix se_predict(const ModelParams& source, const ModelParams& target, const Matrix& x, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("se_predict: alpha must lie in [0, 1]");
  if (!(source.spec == target.spec)) throw ValidationError("se_predict: spec mismatch");
  const Matrix ps = softmax_rows(predict_logits(source, x));
  const Matrix pt = softmax_rows(predict_logits(target, x));
  Matrix out(ps.rows(), ps.cols());
  auto o = out.flat();
  auto s = ps.flat();
  auto t = pt.flat();
  // Endpoints return one model's probabilities exactly.
  if (alpha == 1.0) return ps;
  if (alpha == 0.0) return pt;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * s[i] + (1.0 - alpha) * t[i];
  return out;
}

EvalReport evaluate_se(const ModelParams& source, const ModelParams& target, const TargetTask& task,
                       double alpha) {
  return evaluate_scores(se_predict(source, target, task.test->x, alpha), *task.test, task.seen_mask,
                         task.toxicity);
}

std::vector<Spectrum> spectrum_trace(const TransferRun& run, const Dataset& test, std::size_t k) {
  if (run.checkpoints.empty())
    throw ValidationError("spectrum_trace: run did not retain checkpoints");
  return spectrum_trace(std::span<const ModelParams>(run.checkpoints), test, k);
}

}  // namespace htlab
