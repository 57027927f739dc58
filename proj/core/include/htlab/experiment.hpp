// Config-driven experiment runner behind the `htlab` command-line tool.
//
// Configs are INI files:
//
//   [scenario]            kind = synthetic | toxicity | import | idx, plus
//                         generator arguments or paths
//   [model]               hidden = 64,64  activation = relu  batchnorm = false
//   [source]              SGD settings for source pre-training
//   [target]              SGD / loss / LOLSGD / SWA defaults for protocols
//   [protocol.NAME]       per-protocol overrides of [target] keys
//   [experiment]          protocols, seeds, output_dir, ensemble_alphas, ...
//
// Relative paths are resolved against the config file's directory.

#pragma once

#include "htlab/data.hpp"
#include "htlab/eval.hpp"
#include "htlab/model.hpp"
#include "htlab/optim.hpp"
#include "htlab/transfer.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace htlab {

enum class ScenarioSource { synthetic, toxicity, import_dir, idx };

struct ScenarioSection {
  ScenarioSource source = ScenarioSource::synthetic;
  std::string id = "reference";
  std::uint64_t seed = 8;
  std::size_t num_classes = 10;
  std::size_t num_seen = 6;
  std::size_t dim = 16;
  PerClassCounts per_class;
  double cluster_sep = 5.0;
  double class_sigma = 1.0;
  double style_angle = 0.6;
  double style_shift = 2.0;
  double style_noise = 0.3;
  /// toxicity
  std::size_t pairs = 6;
  double pair_overlap = 0.6;
  /// import
  std::filesystem::path path;
  /// idx: source data as-is, target data split into train/test.
  std::filesystem::path source_images, source_labels, target_images, target_labels;
  std::vector<std::size_t> seen_classes;
  double train_ratio = 0.7;
  std::size_t image_rows = 0, image_cols = 0;

  SyntheticConfig synthetic_config() const;
  ToxicityConfig toxicity_config() const;
};

struct ModelSection {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  bool batchnorm = false;
  bool in_adapter = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  MlpSpec spec_for(std::size_t input_dim, std::size_t num_classes) const;
};

struct ExperimentConfig {
  ScenarioSection scenario;
  ModelSection model;
  SgdConfig source;
  std::vector<Protocol> protocols;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path output_dir = "results";
  bool retain_checkpoints = false;
  /// Post-hoc SE / WiSE mixing weights; none by default.
  std::vector<double> ensemble_alphas;
  std::size_t k_spectrum = 0;

  void validate() const;
};

/// Parses INI text; `base_dir` anchors relative paths.
ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Replaces cfg.seeds with the comma-separated list in `value` (HTLAB_SEED).
void apply_seed_override(ExperimentConfig& cfg, const std::string& value);

struct LoadedScenario {
  HTScenario scenario;
  std::optional<ToxicityMap> toxicity;
};

LoadedScenario materialize_scenario(const ScenarioSection& section);

// ---------------------------------------------------------------------------
// Result tables

/// One row of curves.csv / summary.csv. A failed cell is recorded with
/// `failed` set and no metrics.
struct ResultRow {
  std::string scenario_id;
  std::string protocol;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  bool failed = false;
  double overall = 0.0, seen = 0.0, unseen = 0.0, seen_chopped = 0.0;
  std::optional<double> fnr;
  /// Absent for source-ensemble rows, which have no single feature space.
  std::optional<std::size_t> effective_rank;
  std::vector<double> singular_values;

  static ResultRow from_report(std::string scenario_id, std::string protocol, std::uint64_t seed,
                               std::size_t epoch, const EvalReport& r, bool with_spectrum = true);
  static ResultRow failure(std::string scenario_id, std::string protocol, std::uint64_t seed);
};

/// Header plus rows; sv columns are padded to the longest spectrum.
void write_result_csv(std::ostream& out, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_result_csv(std::istream& in);

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code: 0 success, 1 validation error,
// 2 runtime failure.

struct GenOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::size_t> classes, seen, dim;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "scenario";
  bool force = false;
};

int cmd_gen(const GenOptions& opts, std::ostream& out, std::ostream& err);

struct RunCommandOptions {
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> out;
};

struct RunSummary {
  int exit_code = 0;
  std::size_t cells = 0;
  std::size_t failed = 0;
};

RunSummary run_experiment(const ExperimentConfig& cfg, std::size_t jobs, std::ostream& log);
int cmd_run(const std::filesystem::path& config_path, const RunCommandOptions& opts,
            std::ostream& out, std::ostream& err);

struct ProtocolStats {
  std::string scenario_id;
  std::string protocol;
  std::vector<std::uint64_t> seeds;
  /// Means for every metric; variances only with two or more seeds.
  std::vector<std::pair<std::string, MeanVar>> metrics;
  bool has_variance = false;
  /// protocol mean - naive_ft mean for the accuracy metrics.
  std::vector<std::pair<std::string, double>> delta_vs_naive;
};

struct BestDelta {
  std::string metric;
  std::string protocol;
  double delta = 0.0;
};

struct ExperimentReport {
  std::vector<ProtocolStats> protocols;
  std::vector<BestDelta> best;
  std::size_t failed_cells = 0;

  bool operator==(const ExperimentReport&) const;
};

/// Groups summary rows by (scenario, protocol) in first-seen order.
ExperimentReport build_report(const std::vector<ResultRow>& summary);
std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);
void print_report(std::ostream& out, const ExperimentReport& report);

/// Aggregates `input` (a results directory with summary.csv, or a previously
/// written report.json) into report.json under `out_dir` and prints a table.
int cmd_report(const std::filesystem::path& input, const std::filesystem::path& out_dir,
               std::ostream& out, std::ostream& err);

}  // namespace htlab
