// Cross-entropy, selective distillation on unseen-class logits, the feature
// covariance rank regulariser, and their weighted composition. Every loss is
// a batch mean and returns its gradient with the 1/N factor included.

#pragma once

#include "htlab/numkit.hpp"

#include <optional>
#include <vector>

namespace htlab {

struct LossSpec {
  double lambda_distill = 0.0;
  double lambda_rank = 0.0;
  /// +1 penalises the regulariser as written; -1 rewards it.
  int rank_sign = 1;

  void validate() const;
  bool operator==(const LossSpec&) const = default;
};

struct LossBreakdown {
  double ce = 0.0;
  double distill = 0.0;
  double rank = 0.0;
  double total = 0.0;
};

struct LossTerm {
  double loss = 0.0;
  /// Gradient w.r.t. the term's input (logits or features).
  Matrix grad;
};

/// mean_n -ln softmax(logits_n)[label_n]; grad = (softmax - onehot) / N.
LossTerm cross_entropy(const Matrix& logits, const std::vector<std::size_t>& labels);

/// mean_n KL(softmax(s_n^U) || softmax(t_n^U)) where ^U keeps the unseen
/// columns and each softmax is taken over those columns only. The gradient
/// w.r.t. the target logits is (softmax(t^U) - softmax(s^U)) / N on unseen
/// columns and exactly zero on seen ones.
LossTerm selective_distill(const Matrix& source_logits, const Matrix& target_logits,
                           const std::vector<bool>& seen_mask);

/// With C the population covariance of the features,
/// loss = sum_j ((C^T C)_jj)^2. Requires N >= 2.
LossTerm rank_reg(const Matrix& features);

struct ComposedLoss {
  LossBreakdown breakdown;
  Matrix grad_logits;
  /// Present only when a rank term contributed.
  std::optional<Matrix> grad_features;
};

/// total = ce + lambda_d * distill + rank_sign * lambda_r * rank. A term whose
/// weight is zero (or which is absent) contributes nothing, bitwise.
ComposedLoss compose(const LossTerm& ce, const LossTerm* distill, const LossTerm* rank,
                     const LossSpec& spec);

}  // namespace htlab
