// End-to-end protocols: source pre-training, target adaptation methods and
// post-hoc source/weight-space ensembles.

#pragma once

#include "htlab/data.hpp"
#include "htlab/eval.hpp"
#include "htlab/losses.hpp"
#include "htlab/model.hpp"
#include "htlab/optim.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace htlab {

enum class ProtocolKind {
  source_only,
  naive_ft,
  frozen_ft,
  lp_ft,
  bn_affine_only,
  bn_stats_only,
  in_adapter_only,
  sgd_distill,
  sgd_rank,
  lolsgd,
  lolsgd_distill,
  lolsgd_rank,
  lolsgd_distill_rank,
  swa,
  swad_lite,
};

std::string_view to_string(ProtocolKind k);
ProtocolKind parse_protocol_kind(std::string_view s);
const std::vector<ProtocolKind>& all_protocol_kinds();

struct Protocol {
  ProtocolKind kind = ProtocolKind::naive_ft;
  LossSpec loss;
  SgdConfig sgd;
  LolConfig lol;
  SwaConfig swa;

  std::string name() const { return std::string(to_string(kind)); }
  bool uses_distill() const;
  bool uses_rank() const;
  bool uses_lolsgd() const;
  /// Loss spec with the weights of terms this kind does not use set to zero.
  LossSpec effective_loss() const;
  /// Throws ValidationError for invalid combinations (including with `spec`).
  void validate(const MlpSpec& spec) const;
};

/// Everything a protocol may read. There is deliberately no source data here.
struct TargetTask {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  std::vector<bool> seen_mask;
  const ToxicityMap* toxicity = nullptr;
  std::size_t k_spectrum = 0;
};

TargetTask target_task(const HTScenario& scenario, const ToxicityMap* toxicity = nullptr);

struct TransferRun {
  std::string scenario_id;
  Protocol protocol;
  std::uint64_t seed = 0;
  ModelParams source_params;
  ModelParams final_params;
  /// curve[0] evaluates the source model; curve[e] the model after epoch e.
  std::vector<EvalReport> curve;
  /// Per-epoch models (same indexing as curve) when retained.
  std::vector<ModelParams> checkpoints;
};

/// Trains init_model(spec) on the source training set.
ModelParams pretrain_source(const Dataset& source_train, const MlpSpec& spec, const SgdConfig& sgd,
                            std::uint64_t seed);
ModelParams pretrain_source(const HTScenario& scenario, const MlpSpec& spec, const SgdConfig& sgd,
                            std::uint64_t seed);

struct RunOptions {
  bool retain_checkpoints = false;
  std::string scenario_id = "scenario";
};

TransferRun run_protocol(const TargetTask& task, const ModelParams& source_params,
                         const Protocol& protocol, std::uint64_t seed, const RunOptions& opts = {});

/// alpha * source + (1 - alpha) * target in weight space.
ModelParams wise_merge(const ModelParams& source, const ModelParams& target, double alpha);

/// alpha * softmax(source logits) + (1 - alpha) * softmax(target logits).
Matrix se_predict(const ModelParams& source, const ModelParams& target, const Matrix& x, double alpha);

/// Accuracy views of the SE prediction (spectrum left empty).
EvalReport evaluate_se(const ModelParams& source, const ModelParams& target, const TargetTask& task,
                       double alpha);

/// Spectra of the retained per-epoch checkpoints of `run`.
std::vector<Spectrum> spectrum_trace(const TransferRun& run, const Dataset& test, std::size_t k = 0);

}  // namespace htlab
