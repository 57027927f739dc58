#include "htlab/eval.hpp"

#include <algorithm>

namespace htlab {

std::size_t effective_rank(const Spectrum& s, double tau) {
  if (s.values.empty() || !(s.values.front() > 0.0)) return 0;
  const double cut = tau * s.values.front();
  return static_cast<std::size_t>(
      std::ranges::count_if(s.values, [cut](double v) { return v >= cut; }));
}

EvalReport evaluate_scores(const Matrix& scores, const Dataset& test,
                           const std::vector<bool>& seen_mask, const ToxicityMap* toxicity) {
  if (test.empty()) throw ValidationError("evaluate: empty test set");
  if (scores.rows() != test.size() || scores.cols() != seen_mask.size())
    throw ValidationError("evaluate: score matrix shape does not match test set");
  std::vector<std::size_t> seen_cols;
  for (std::size_t c = 0; c < seen_mask.size(); ++c)
    if (seen_mask[c]) seen_cols.push_back(c);

  EvalReport r;
  std::size_t correct_seen = 0, correct_unseen = 0, correct_chopped = 0;
  std::size_t toxic_total = 0, toxic_missed = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto label = test.y[i];
    const auto row = scores.row(i);
    const auto pred = argmax(row);
    if (seen_mask.at(label)) {
      ++r.n_seen;
      if (pred == label) ++correct_seen;
      std::size_t best = 0;
      for (std::size_t k = 1; k < seen_cols.size(); ++k)
        if (row[seen_cols[k]] > row[seen_cols[best]]) best = k;
      if (seen_cols[best] == label) ++correct_chopped;
    } else {
      ++r.n_unseen;
      if (pred == label) ++correct_unseen;
    }
    if (toxicity && toxicity->is_toxic(label)) {
      ++toxic_total;
      if (toxicity->is_non_toxic(pred)) ++toxic_missed;
    }
  }
  if (r.n_seen == 0 || r.n_unseen == 0)
    throw ValidationError("evaluate: test set must contain seen and unseen samples");
  const double n = static_cast<double>(test.size());
  r.overall_acc = static_cast<double>(correct_seen + correct_unseen) / n;
  r.seen_acc = static_cast<double>(correct_seen) / static_cast<double>(r.n_seen);
  r.unseen_acc = static_cast<double>(correct_unseen) / static_cast<double>(r.n_unseen);
  r.seen_chopped_acc = static_cast<double>(correct_chopped) / static_cast<double>(r.n_seen);
  if (toxicity)
    r.false_negative_rate =
        toxic_total ? static_cast<double>(toxic_missed) / static_cast<double>(toxic_total) : 0.0;
  return r;
}

namespace {

std::size_t resolve_k(std::size_t k, std::size_t width, std::size_t n) {
  return k == 0 ? std::min(width, n) : k;
}

}  // namespace

Spectrum feature_spectrum(const ModelParams& params, const Dataset& test, std::size_t k) {
  const Matrix z = predict_features(params, test.x);
  return top_singular_values(z, resolve_k(k, z.cols(), z.rows()));
}

EvalReport evaluate(const ModelParams& params, const Dataset& test, const std::vector<bool>& seen_mask,
                    const ToxicityMap* toxicity, std::size_t k_spectrum) {
  if (test.empty()) throw ValidationError("evaluate: empty test set");
  // One eval-mode pass gives both logits and features.
  Matrix logits(test.size(), params.spec.num_classes());
  Matrix feats(test.size(), params.spec.feature_dim());
  constexpr std::size_t kBatch = 512;
  for (std::size_t start = 0; start < test.size(); start += kBatch) {
    const std::size_t stop = std::min(test.size(), start + kBatch);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto tr = forward(params, gather_rows(test.x, idx), Mode::eval);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::ranges::copy(tr.logits.row(i), logits.row(start + i).begin());
      std::ranges::copy(tr.features.row(i), feats.row(start + i).begin());
    }
  }
  EvalReport r = evaluate_scores(logits, test, seen_mask, toxicity);
  r.spectrum = top_singular_values(feats, resolve_k(k_spectrum, feats.cols(), feats.rows()));
  r.effective_rank = effective_rank(r.spectrum);
  return r;
}

std::vector<Spectrum> spectrum_trace(std::span<const ModelParams> checkpoints, const Dataset& test,
                                     std::size_t k) {
  if (checkpoints.empty()) throw ValidationError("spectrum_trace: no checkpoints retained");
  std::vector<Spectrum> out;
  out.reserve(checkpoints.size());
  for (const auto& p : checkpoints) out.push_back(feature_spectrum(p, test, k));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

const MeanVar& AggregateReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics)
    if (k == name) return v;
  throw ValidationError("AggregateReport: no metric '" + name + "'");
}

MeanVar mean_variance(std::vector<double> values) {
  if (values.empty()) throw ValidationError("mean_variance: no values");
  std::ranges::sort(values);
  // Constant samples: the rounded sum / n need not reproduce the value.
  if (values.front() == values.back()) return {values.front(), 0.0};
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  std::vector<double> sq;
  sq.reserve(values.size());
  for (double v : values) sq.push_back((v - mean) * (v - mean));
  std::ranges::sort(sq);
  double ss = 0.0;
  for (double v : sq) ss += v;
  return {mean, ss / n};
}

AggregateReport aggregate_seeds(std::span<const RunReport> reports) {
  if (reports.size() < 2) throw ValidationError("aggregate_seeds: need at least 2 reports");
  AggregateReport agg;
  agg.scenario_id = reports.front().scenario_id;
  agg.protocol = reports.front().protocol;
  bool all_fnr = true;
  for (const auto& r : reports) {
    if (r.protocol != agg.protocol || r.scenario_id != agg.scenario_id)
      throw ValidationError("aggregate_seeds: mismatched protocols or scenarios");
    agg.seeds.push_back(r.seed);
    all_fnr = all_fnr && r.report.false_negative_rate.has_value();
  }
  auto collect = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(get(r.report));
    return mean_variance(std::move(v));
  };
  agg.metrics.emplace_back("overall", collect([](const EvalReport& e) { return e.overall_acc; }));
  agg.metrics.emplace_back("seen", collect([](const EvalReport& e) { return e.seen_acc; }));
  agg.metrics.emplace_back("unseen", collect([](const EvalReport& e) { return e.unseen_acc; }));
  agg.metrics.emplace_back("seen_chopped",
                           collect([](const EvalReport& e) { return e.seen_chopped_acc; }));
  agg.metrics.emplace_back("effective_rank", collect([](const EvalReport& e) {
                             return static_cast<double>(e.effective_rank);
                           }));
  if (all_fnr)
    agg.metrics.emplace_back("fnr", collect([](const EvalReport& e) { return *e.false_negative_rate; }));
  return agg;
}

}  // namespace htlab
