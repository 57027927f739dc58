#include "htlab/losses.hpp"

#include <cmath>

namespace htlab {

void LossSpec::validate() const {
  if (!(lambda_distill >= 0.0) || !(lambda_rank >= 0.0))
    throw ValidationError("LossSpec: weights must be >= 0");
  if (rank_sign != 1 && rank_sign != -1) throw ValidationError("LossSpec: rank_sign must be +1 or -1");
}

LossTerm cross_entropy(const Matrix& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.rows();
  if (n == 0) throw ValidationError("cross_entropy: empty batch");
  if (labels.size() != n) throw ValidationError("cross_entropy: label count mismatch");
  LossTerm out{0.0, Matrix(n, logits.cols())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= logits.cols()) throw ValidationError("cross_entropy: label out of range");
    auto row = logits.row(i);
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double log_z = m + std::log(z);
    out.loss += log_z - row[labels[i]];
    auto g = out.grad.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) g[c] = std::exp(row[c] - log_z) * inv_n;
    g[labels[i]] -= inv_n;
  }
  out.loss *= inv_n;
  return out;
}

LossTerm selective_distill(const Matrix& source_logits, const Matrix& target_logits,
                           const std::vector<bool>& seen_mask) {
  if (!source_logits.same_shape(target_logits))
    throw ValidationError("selective_distill: logit shapes differ");
  if (seen_mask.size() != target_logits.cols())
    throw ValidationError("selective_distill: mask length != number of classes");
  std::vector<std::size_t> unseen;
  for (std::size_t c = 0; c < seen_mask.size(); ++c)
    if (!seen_mask[c]) unseen.push_back(c);
  if (unseen.empty()) throw ValidationError("selective_distill: no unseen classes");

  const std::size_t n = target_logits.rows();
  if (n == 0) throw ValidationError("selective_distill: empty batch");
  const double inv_n = 1.0 / static_cast<double>(n);
  LossTerm out{0.0, Matrix(n, target_logits.cols())};
  std::vector<double> s(unseen.size()), t(unseen.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < unseen.size(); ++k) {
      s[k] = source_logits(i, unseen[k]);
      t[k] = target_logits(i, unseen[k]);
    }
    const auto ps = softmax(s);
    const auto pt = softmax(t);
    out.loss += kl_div(ps, pt);
    for (std::size_t k = 0; k < unseen.size(); ++k) out.grad(i, unseen[k]) = (pt[k] - ps[k]) * inv_n;
  }
  out.loss *= inv_n;
  return out;
}

LossTerm rank_reg(const Matrix& features) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (n < 2) throw ValidationError("rank_reg: need at least 2 samples");
  const Matrix c = covariance(features);
  // s_j = (C^T C)_jj = sum_k C_kj^2
  std::vector<double> s(d, 0.0);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j) s[j] += c(k, j) * c(k, j);
  LossTerm out;
  for (double v : s) out.loss += v * v;

  // dL/dC_kj = 4 s_j C_kj, and for symmetric C built from centred Z,
  // dL/dZ = (1/N) Zc (G + G^T).
  Matrix gsym(d, d);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j) gsym(k, j) = 4.0 * c(k, j) * (s[j] + s[k]);
  const auto mean = column_means(features);
  Matrix zc(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) zc(i, j) = features(i, j) - mean[j];
  out.grad = matmul(zc, gsym);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (double& v : out.grad.flat()) v *= inv_n;
  return out;
}

ComposedLoss compose(const LossTerm& ce, const LossTerm* distill, const LossTerm* rank,
                     const LossSpec& spec) {
  spec.validate();
  ComposedLoss out;
  out.breakdown.ce = ce.loss;
  out.breakdown.total = ce.loss;
  out.grad_logits = ce.grad;
  if (distill && spec.lambda_distill != 0.0) {
    if (!distill->grad.same_shape(ce.grad)) throw ValidationError("compose: distill shape mismatch");
    out.breakdown.distill = distill->loss;
    out.breakdown.total += spec.lambda_distill * distill->loss;
    auto dst = out.grad_logits.flat();
    auto src = distill->grad.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += spec.lambda_distill * src[i];
  }
  if (rank && spec.lambda_rank != 0.0) {
    const double w = static_cast<double>(spec.rank_sign) * spec.lambda_rank;
    out.breakdown.rank = rank->loss;
    out.breakdown.total += w * rank->loss;
    Matrix g = rank->grad;
    for (double& v : g.flat()) v *= w;
    out.grad_features = std::move(g);
  }
  return out;
}

}  // namespace htlab
