#include "htlab/losses.hpp"

#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace htlab;

namespace {

double naive_rank_loss(const Matrix& z) {
  const Matrix c = oracle::naive_covariance(z);
  const Matrix ctc = oracle::naive_matmul(oracle::naive_matmul(Matrix::identity(c.rows()), c), c);
  double s = 0.0;
  for (std::size_t j = 0; j < c.cols(); ++j) {
    double diag = 0.0;
    for (std::size_t i = 0; i < c.rows(); ++i) diag += c(i, j) * c(i, j);
    EXPECT_NEAR(diag, ctc(j, j), 1e-12 * std::max(1.0, std::abs(diag)));
    s += diag * diag;
  }
  return s;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const Matrix logits(3, 4, 0.7);
  const auto ce = cross_entropy(logits, {0, 1, 3});
  EXPECT_NEAR(ce.loss, std::log(4.0), 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t label = i == 2 ? 3 : i;
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(ce.grad(i, c), ((c == label ? -0.75 : 0.25)) / 3.0, 1e-15);
  }
}

TEST(CrossEntropy, MonotoneDecreasingInMargin) {
  double prev = 1e300;
  for (double margin : {0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0}) {
    const Matrix logits = Matrix::from_rows({{margin, 0.0, 0.0}});
    const double loss = cross_entropy(logits, {0}).loss;
    EXPECT_LT(loss, prev);
    EXPECT_GE(loss, 0.0);
    prev = loss;
  }
  // Past double resolution the loss saturates at zero but never turns negative.
  for (double margin : {100.0, 800.0}) {
    const double loss = cross_entropy(Matrix::from_rows({{margin, 0.0, 0.0}}), {0}).loss;
    EXPECT_LE(loss, prev);
    EXPECT_GE(loss, 0.0);
    EXPECT_TRUE(std::isfinite(loss));
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  Matrix logits = oracle::random_matrix(rng, 5, 3, 2.0);
  const std::vector<std::size_t> labels = {0, 2, 1, 1, 0};
  const auto ce = cross_entropy(logits, labels);
  const auto numeric =
      oracle::numeric_gradient(logits.flat(), [&] { return cross_entropy(logits, labels).loss; });
  EXPECT_LT(oracle::max_rel_err(ce.grad.flat(), numeric), 1e-6);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
  EXPECT_THROW(cross_entropy(Matrix(2, 3), {0, 3}), ValidationError);
  EXPECT_THROW(cross_entropy(Matrix(2, 3), {0}), ValidationError);
}

TEST(Distill, WorkedExample) {
  // Seen column 0 carries arbitrary values; unseen columns 1 and 2.
  const Matrix s = Matrix::from_rows({{5.0, 0.0, std::log(3.0)}});
  const Matrix t = Matrix::from_rows({{-2.0, 0.0, 0.0}});
  const auto d = selective_distill(s, t, {true, false, false});
  const double expect = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  EXPECT_NEAR(d.loss, expect, 1e-15);
  EXPECT_NEAR(d.loss, 0.13081, 1e-5);
  EXPECT_EQ(d.grad(0, 0), 0.0);
  EXPECT_NEAR(d.grad(0, 1), 0.5 - 0.25, 1e-15);
  EXPECT_NEAR(d.grad(0, 2), 0.5 - 0.75, 1e-15);
}

TEST(Distill, SeenColumnsHaveExactlyZeroGradient) {
  Rng rng(2);
  const Matrix s = oracle::random_matrix(rng, 7, 6, 3.0);
  const Matrix t = oracle::random_matrix(rng, 7, 6, 3.0);
  const std::vector<bool> mask = {true, false, true, false, false, true};
  const auto d = selective_distill(s, t, mask);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 6; ++c)
      if (mask[c]) {
        EXPECT_EQ(d.grad(i, c), 0.0);
      }
}

TEST(Distill, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const Matrix s = oracle::random_matrix(rng, 4, 5, 2.0);
  Matrix t = oracle::random_matrix(rng, 4, 5, 2.0);
  const std::vector<bool> mask = {false, true, false, true, false};
  const auto d = selective_distill(s, t, mask);
  const auto numeric =
      oracle::numeric_gradient(t.flat(), [&] { return selective_distill(s, t, mask).loss; });
  EXPECT_LT(oracle::max_rel_err(d.grad.flat(), numeric), 1e-6);
}

TEST(Distill, IdenticalLogitsGiveZero) {
  Rng rng(4);
  const Matrix s = oracle::random_matrix(rng, 6, 5);
  const auto d = selective_distill(s, s, {true, false, false, true, false});
  EXPECT_EQ(d.loss, 0.0);
  for (double v : d.grad.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Distill, NonNegativeAndZeroOnlyWhenRestrictedSoftmaxesAgree) {
  Rng rng(5);
  const std::vector<bool> mask = {false, false, true, false};
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix s = oracle::random_matrix(rng, 3, 4, 3.0);
    const Matrix t = oracle::random_matrix(rng, 3, 4, 3.0);
    EXPECT_GT(selective_distill(s, t, mask).loss, 0.0);
  }
  // Shifting every unseen logit by a per-row constant and changing seen
  // logits leaves the restricted softmaxes unchanged.
  const Matrix s = oracle::random_matrix(rng, 3, 4);
  Matrix t = s;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) t(i, c) += mask[c] ? 9.0 : 1.5 * static_cast<double>(i);
  }
  EXPECT_LT(selective_distill(s, t, mask).loss, 1e-12);
}

TEST(Distill, RequiresUnseenClasses) {
  EXPECT_THROW(selective_distill(Matrix(2, 3), Matrix(2, 3), {true, true, true}), ValidationError);
  EXPECT_THROW(selective_distill(Matrix(2, 3), Matrix(3, 3), {true, false, true}), ValidationError);
}

TEST(Rank, ConstantBatchGivesZero) {
  const Matrix z(6, 4, 2.5);
  const auto r = rank_reg(z);
  EXPECT_EQ(r.loss, 0.0);
  for (double v : r.grad.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Rank, MatchesNaiveOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix z = oracle::random_matrix(rng, 9, 5, 1.5);
    const double expect = naive_rank_loss(z);
    EXPECT_LE(oracle::rel_err(rank_reg(z).loss, expect), 1e-12);
  }
}

TEST(Rank, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  Matrix z = oracle::random_matrix(rng, 6, 4);
  const auto r = rank_reg(z);
  const auto numeric = oracle::numeric_gradient(z.flat(), [&] { return rank_reg(z).loss; });
  EXPECT_LT(oracle::max_rel_err(r.grad.flat(), numeric), 1e-5);
}

TEST(Rank, InvariantToRowShift) {
  Rng rng(8);
  const Matrix z = oracle::random_matrix(rng, 10, 6);
  Matrix shifted = z;
  const std::vector<double> offset = {3.0, -7.0, 0.5, 11.0, -2.0, 4.0};
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += offset[j];
  EXPECT_LE(oracle::rel_err(rank_reg(z).loss, rank_reg(shifted).loss), 1e-10);
}

TEST(Rank, RequiresTwoRows) {
  EXPECT_THROW(rank_reg(Matrix(1, 3)), ValidationError);
}

namespace {

struct Terms {
  LossTerm ce, distill, rank;
};

Terms sample_terms() {
  Rng rng(9);
  const Matrix logits = oracle::random_matrix(rng, 6, 5);
  const Matrix source = oracle::random_matrix(rng, 6, 5);
  const Matrix feats = oracle::random_matrix(rng, 6, 4);
  return {cross_entropy(logits, {0, 1, 2, 0, 1, 2}),
          selective_distill(source, logits, {true, true, true, false, false}), rank_reg(feats)};
}

}  // namespace

TEST(Compose, ZeroWeightsReduceToCrossEntropyBitwise) {
  const auto t = sample_terms();
  const auto c = compose(t.ce, &t.distill, &t.rank, LossSpec{});
  EXPECT_EQ(c.breakdown.total, t.ce.loss);
  EXPECT_EQ(c.grad_logits, t.ce.grad);
  EXPECT_FALSE(c.grad_features.has_value());
  const auto only = compose(t.ce, nullptr, nullptr, LossSpec{});
  EXPECT_EQ(only.grad_logits, c.grad_logits);
}

TEST(Compose, ExactWeightedSum) {
  const auto t = sample_terms();
  const LossSpec spec{0.7, 0.3, 1};
  const auto c = compose(t.ce, &t.distill, &t.rank, spec);
  EXPECT_EQ(c.breakdown.total, t.ce.loss + 0.7 * t.distill.loss + 0.3 * t.rank.loss);
  EXPECT_EQ(c.breakdown.ce, t.ce.loss);
  EXPECT_EQ(c.breakdown.distill, t.distill.loss);
  EXPECT_EQ(c.breakdown.rank, t.rank.loss);
  for (std::size_t i = 0; i < c.grad_logits.size(); ++i)
    EXPECT_EQ(c.grad_logits.flat()[i], t.ce.grad.flat()[i] + 0.7 * t.distill.grad.flat()[i]);
  ASSERT_TRUE(c.grad_features.has_value());
  for (std::size_t i = 0; i < c.grad_features->size(); ++i)
    EXPECT_EQ(c.grad_features->flat()[i], 0.3 * t.rank.grad.flat()[i]);

  const auto neg = compose(t.ce, &t.distill, &t.rank, LossSpec{0.7, 0.3, -1});
  EXPECT_EQ(neg.breakdown.total, t.ce.loss + 0.7 * t.distill.loss - 0.3 * t.rank.loss);
}

TEST(Compose, LinearInEachWeight) {
  const auto t = sample_terms();
  const double base = compose(t.ce, &t.distill, &t.rank, LossSpec{}).breakdown.total;
  for (double ld : {0.5, 1.0, 2.0}) {
    const double total = compose(t.ce, &t.distill, &t.rank, LossSpec{ld, 0.0, 1}).breakdown.total;
    EXPECT_NEAR(total - base, ld * t.distill.loss, 1e-14);
  }
  std::vector<double> contrib;
  for (double lr : {1.0, 2.0, 4.0}) {
    const double total = compose(t.ce, &t.distill, &t.rank, LossSpec{0.0, lr, 1}).breakdown.total;
    contrib.push_back(total - base);
  }
  EXPECT_NEAR(contrib[1], 2.0 * contrib[0], 1e-12 * std::abs(contrib[0]) + 1e-15);
  EXPECT_NEAR(contrib[2], 2.0 * contrib[1], 1e-12 * std::abs(contrib[1]) + 1e-15);
}

TEST(Compose, LargeWeightsAreValid) {
  const LossSpec spec{10.0, 100.0, 1};
  EXPECT_NO_THROW(spec.validate());
  const auto t = sample_terms();
  EXPECT_NO_THROW(compose(t.ce, &t.distill, &t.rank, spec));
}

TEST(Compose, RejectsInvalidSpecs) {
  EXPECT_THROW((LossSpec{-1.0, 0.0, 1}).validate(), ValidationError);
  EXPECT_THROW((LossSpec{0.0, -0.5, 1}).validate(), ValidationError);
  EXPECT_THROW((LossSpec{0.0, 0.0, 0}).validate(), ValidationError);
}
