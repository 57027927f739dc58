// Accuracy views, false-negative rate, feature spectra and seed aggregation.

#pragma once

#include "htlab/data.hpp"
#include "htlab/model.hpp"
#include "htlab/numkit.hpp"

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace htlab {

/// Leading-value fraction below which a singular value no longer counts
/// towards the effective rank.
inline constexpr double kEffectiveRankTau = 0.01;

struct EvalReport {
  double overall_acc = 0.0;
  double seen_acc = 0.0;
  double unseen_acc = 0.0;
  /// Seen-class accuracy with the unseen columns removed before argmax.
  double seen_chopped_acc = 0.0;
  /// Fraction of toxic-class samples predicted as any non-toxic class.
  std::optional<double> false_negative_rate;
  /// Top singular values of the test-set penultimate features.
  Spectrum spectrum;
  std::size_t effective_rank = 0;
  std::size_t n_seen = 0;
  std::size_t n_unseen = 0;

  bool operator==(const EvalReport&) const = default;
};

std::size_t effective_rank(const Spectrum& s, double tau = kEffectiveRankTau);

/// Accuracy views from any per-class score matrix (logits or probabilities);
/// argmax ties go to the lowest index. The spectrum is left empty.
EvalReport evaluate_scores(const Matrix& scores, const Dataset& test,
                           const std::vector<bool>& seen_mask, const ToxicityMap* toxicity);

/// Eval-mode predictions plus the feature spectrum. k_spectrum = 0 keeps
/// the full spectrum, min(feature width, test size) values.
EvalReport evaluate(const ModelParams& params, const Dataset& test, const std::vector<bool>& seen_mask,
                    const ToxicityMap* toxicity = nullptr, std::size_t k_spectrum = 0);

/// Spectrum of the eval-mode penultimate features of `test`.
Spectrum feature_spectrum(const ModelParams& params, const Dataset& test, std::size_t k = 0);

/// One spectrum per checkpoint, in order.
std::vector<Spectrum> spectrum_trace(std::span<const ModelParams> checkpoints, const Dataset& test,
                                     std::size_t k = 0);

struct RunReport {
  std::string scenario_id;
  std::string protocol;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct MeanVar {
  double mean = 0.0;
  /// Population variance.
  double variance = 0.0;
};

struct AggregateReport {
  std::string scenario_id;
  std::string protocol;
  std::vector<std::uint64_t> seeds;
  /// Named metrics in a fixed order: overall, seen, unseen, seen_chopped,
  /// effective_rank, then fnr when every report carries one.
  std::vector<std::pair<std::string, MeanVar>> metrics;

  const MeanVar& metric(const std::string& name) const;
};

/// Population mean and variance of each metric. Values are summed in sorted
/// order so the result does not depend on report order.
MeanVar mean_variance(std::vector<double> values);

AggregateReport aggregate_seeds(std::span<const RunReport> reports);

}  // namespace htlab
