// Holistic-transfer scenarios: datasets, style-shifted synthetic generators,
// IDX ingestion and seen/unseen splitting.

#pragma once

#include "htlab/numkit.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace htlab {

struct Sample {
  std::vector<double> x;
  std::size_t y = 0;
};

/// Feature matrix plus labels. Row i of `x` is sample i.
struct Dataset {
  Matrix x;
  std::vector<std::size_t> y;
  std::size_t num_classes = 0;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  bool empty() const { return y.empty(); }

  Sample sample(std::size_t i) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Indices of samples whose label is in `keep` (a per-class mask).
  std::vector<std::size_t> indices_with_labels(const std::vector<bool>& keep) const;
  std::vector<std::size_t> class_histogram() const;

  static Dataset from_samples(const std::vector<Sample>& samples, std::size_t num_classes);
  /// Throws ValidationError unless all labels are < num_classes and shapes agree.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

/// Affine covariate shift x -> A x + b + N(0, noise_sigma^2 I).
class StyleTransform {
 public:
  /// Throws ValidationError when A is not square, b does not match, or
  /// |det A| <= 1e-9.
  StyleTransform(Matrix a, std::vector<double> b, double noise_sigma);

  static StyleTransform identity(std::size_t dim);
  /// Rotation by `angle` radians in the coordinate planes (0,1), (2,3), ...
  /// followed by a shift of Euclidean length `shift` along a direction drawn
  /// from `seed`.
  static StyleTransform rotation_shift(std::size_t dim, double angle, double shift,
                                       double noise_sigma, std::uint64_t seed);

  const Matrix& a() const { return a_; }
  const std::vector<double>& b() const { return b_; }
  double noise_sigma() const { return noise_sigma_; }
  std::size_t dim() const { return b_.size(); }

  /// Maps one point; draws noise from `rng` only when noise_sigma > 0.
  std::vector<double> apply(std::span<const double> x, Rng& rng) const;

 private:
  Matrix a_;
  std::vector<double> b_;
  double noise_sigma_;
};

enum class ScenarioKind { synthetic, idx };

struct HTScenario {
  Dataset source_train;
  Dataset target_train;
  Dataset target_test;
  std::vector<bool> seen_mask;
  std::uint64_t seed = 0;
  ScenarioKind kind = ScenarioKind::synthetic;
  /// Image geometry for IDX-backed scenarios (rows x cols == dim).
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;

  std::size_t num_classes() const { return seen_mask.size(); }
  std::size_t num_seen() const;
  std::vector<std::size_t> seen_classes() const;
  std::vector<std::size_t> unseen_classes() const;

  /// Throws ValidationError when any scenario invariant is violated.
  void validate() const;
};

struct ToxicityMap {
  /// (toxic_class, non_toxic_class)
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  bool is_toxic(std::size_t c) const;
  bool is_non_toxic(std::size_t c) const;
};

struct PerClassCounts {
  std::size_t source_train = 200;
  std::size_t target_train = 60;
  std::size_t target_test = 40;
};

struct SyntheticConfig {
  std::size_t num_classes = 10;
  std::size_t num_seen = 6;
  std::size_t dim = 16;
  PerClassCounts per_class;
  double cluster_sep = 6.0;
  /// Within-class standard deviation.
  double class_sigma = 1.0;
  std::optional<StyleTransform> style;  // identity when empty
  std::uint64_t seed = 0;
};

/// Class means and style shared by every split generated from one config.
/// Source samples are N(mu_c, sigma^2 I); target samples are the same draws
/// pushed through the style transform.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SyntheticConfig& cfg);
  SyntheticWorld(Matrix means, double class_sigma, StyleTransform style);

  const Matrix& means() const { return means_; }
  const StyleTransform& style() const { return style_; }
  std::size_t num_classes() const { return means_.rows(); }
  std::size_t dim() const { return means_.cols(); }

  Dataset sample_source(const std::vector<std::size_t>& per_class, Rng& rng) const;
  Dataset sample_target(const std::vector<std::size_t>& per_class, Rng& rng) const;

 private:
  Matrix means_;
  double class_sigma_;
  StyleTransform style_;
};

/// Class means drawn as Gaussian directions and rescaled so the minimum
/// pairwise distance equals `min_sep`.
Matrix place_class_means(std::size_t num_classes, std::size_t dim, double min_sep, Rng& rng);

HTScenario gen_synthetic_scenario(const SyntheticConfig& cfg);

/// Fully labelled target training set (all classes) drawn from the same world
/// as gen_synthetic_scenario(cfg) but from an independent stream. Used as the
/// full-data reference in diagnostics.
Dataset gen_full_target_train(const SyntheticConfig& cfg);

/// Held-out source-distribution data for `cfg`.
Dataset gen_source_holdout(const SyntheticConfig& cfg, std::size_t per_class);

struct ToxicityConfig {
  std::size_t num_pairs = 6;
  std::size_t dim = 16;
  PerClassCounts per_class;
  /// 0 puts pair members as far apart as unrelated classes; values near 1
  /// make them nearly coincide.
  double pair_overlap = 0.6;
  double cluster_sep = 6.0;
  double class_sigma = 1.0;
  std::optional<StyleTransform> style;
  std::uint64_t seed = 0;
};

/// Pair p occupies classes 2p (toxic) and 2p + 1 (non-toxic); only the
/// non-toxic members are seen.
std::pair<HTScenario, ToxicityMap> gen_paired_toxicity_scenario(const ToxicityConfig& cfg);

/// IDX magic numbers (big-endian u32).
inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const IdxImages& images);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Pixels scaled to [0, 1], images flattened row-major. num_classes is
/// max(label) + 1.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

struct SplitFragment {
  Dataset target_train;
  Dataset target_test;
  std::vector<bool> seen_mask;
  /// Row ids into the input dataset. train_ids covers only seen classes;
  /// dropped_ids are unseen-class training rows removed by the filter.
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> test_ids;
  std::vector<std::size_t> dropped_ids;
  std::vector<std::string> warnings;
};

/// Per-class stratified split; each class with n >= 2 samples sends
/// clamp(round(train_ratio * n), 1, n - 1) to training. Classes with fewer
/// than two samples go entirely to test with a warning.
SplitFragment make_ht_split(const Dataset& full, const std::vector<std::size_t>& seen_classes,
                            double train_ratio, std::uint64_t seed);

/// Scenario directory: `meta` plus one data file per split. Toxicity pairs,
/// when given, are stored in `meta` as well.
void export_scenario(const HTScenario& scenario, const std::filesystem::path& dir,
                     const ToxicityMap* toxicity = nullptr);
HTScenario import_scenario(const std::filesystem::path& dir);
/// The toxicity pairs stored with a scenario, if any.
std::optional<ToxicityMap> import_toxicity(const std::filesystem::path& dir);

/// Flat little-endian f64 dataset file; see scenario_io.cpp for the layout.
void write_f64_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_f64_dataset(const std::filesystem::path& path);

}  // namespace htlab
