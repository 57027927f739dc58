#include "htlab/experiment.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace htlab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("htlab_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const char* kTiny = R"([scenario]
id = tiny
seed = 4
classes = 5
seen = 3
dim = 4
source_per_class = 30
target_train_per_class = 12
target_test_per_class = 10

[model]
hidden = 8

[source]
epochs = 2
lr = 0.05

[target]
epochs = 2
lr = 0.02
subsets = 2
leave_k = 1

[experiment]
protocols = naive_ft, lolsgd
seeds = 1, 2, 3
output_dir = results
)";

// Writes `text` as run.ini inside `dir` and returns its path.
fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "run.ini";
  spit(p, text);
  return p;
}

struct Captured {
  int code;
  std::string out, err;
};

Captured run_cmd(const fs::path& cfg, std::size_t jobs = 1) {
  std::ostringstream out, err;
  RunCommandOptions opts;
  opts.jobs = jobs;
  const int code = cmd_run(cfg, opts, out, err);
  return {code, out.str(), err.str()};
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~ScopedEnv() { ::unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Config, ParsesReferenceDefaults) {
  const auto cfg = parse_experiment_config("[experiment]\nprotocols = naive_ft\n");
  EXPECT_EQ(cfg.scenario.num_classes, 10u);
  EXPECT_EQ(cfg.scenario.num_seen, 6u);
  EXPECT_EQ(cfg.model.hidden, (std::vector<std::size_t>{64, 64}));
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  ASSERT_EQ(cfg.protocols.size(), 1u);
  EXPECT_EQ(cfg.protocols[0].name(), "naive_ft");
}

TEST(Config, ProtocolSectionOverridesTarget) {
  const auto cfg = parse_experiment_config(
      "[target]\nlr = 0.1\n[protocol.lolsgd]\nlr = 0.3\n[experiment]\nprotocols = naive_ft, lolsgd\n");
  EXPECT_EQ(cfg.protocols[0].sgd.lr, 0.1);
  EXPECT_EQ(cfg.protocols[1].sgd.lr, 0.3);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_experiment_config("[bogus]\nx = 1\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[model]\nwidth = 3\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[experiment]\nseeds = 1, 1\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[experiment]\nprotocols = naive_ft, naive_ft\n"),
               ValidationError);
  EXPECT_THROW(parse_experiment_config("[experiment]\nprotocols = nope\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[source]\nlr = fast\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[protocol.lolsgd]\nlr = 1\n[experiment]\nprotocols = naive_ft\n"),
               ValidationError);
  EXPECT_THROW(parse_experiment_config("[experiment]\nensemble_alphas = 1.5\n"), ValidationError);
  EXPECT_THROW(parse_experiment_config("[target]\nrank_sign = 2\n"), ValidationError);
}

TEST(Config, SeedOverride) {
  auto cfg = parse_experiment_config("");
  apply_seed_override(cfg, "7, 9");
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{7, 9}));
  EXPECT_THROW(apply_seed_override(cfg, ""), ValidationError);
}

TEST(Gen, WritesLoadableScenarioDeterministically) {
  TempDir tmp;
  GenOptions opts;
  opts.classes = 6;
  opts.seen = 4;
  opts.dim = 5;
  opts.seed = 11;
  opts.out = tmp.path() / "a";
  std::ostringstream out, err;
  ASSERT_EQ(cmd_gen(opts, out, err), 0) << err.str();
  EXPECT_NE(out.str().find("6 classes (4 seen), dim 5"), std::string::npos) << out.str();

  opts.out = tmp.path() / "b";
  ASSERT_EQ(cmd_gen(opts, out, err), 0);
  for (const auto& e : fs::directory_iterator(tmp.path() / "a"))
    EXPECT_EQ(slurp(e.path()), slurp(tmp.path() / "b" / e.path().filename())) << e.path();

  const HTScenario sc = import_scenario(tmp.path() / "a");
  EXPECT_EQ(sc.num_classes(), 6u);
  EXPECT_EQ(sc.num_seen(), 4u);
  EXPECT_EQ(sc.target_test.dim(), 5u);
}

TEST(Gen, RefusesNonEmptyDirectoryWithoutForce) {
  TempDir tmp;
  GenOptions opts;
  opts.classes = 4;
  opts.seen = 2;
  opts.dim = 3;
  opts.out = tmp.path();
  spit(tmp.path() / "junk", "x");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gen(opts, out, err), 1);
  EXPECT_NE(err.str().find("--force"), std::string::npos);
  opts.force = true;
  EXPECT_EQ(cmd_gen(opts, out, err), 0) << err.str();
}

TEST(Gen, RejectsScenarioWithoutUnseenClasses) {
  TempDir tmp;
  GenOptions opts;
  opts.classes = 5;
  opts.seen = 5;
  opts.out = tmp.path() / "s";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gen(opts, out, err), 1);
  EXPECT_NE(err.str().find("no unseen classes"), std::string::npos) << err.str();
}

TEST(ResultCsv, RoundTripsExactly) {
  ResultRow a;
  a.scenario_id = "s";
  a.protocol = "lolsgd";
  a.seed = 3;
  a.epoch = 7;
  a.overall = 0.1 + 0.2;
  a.seen = 1.0 / 3.0;
  a.unseen = 2.0 / 7.0;
  a.seen_chopped = 0.999999999999;
  a.fnr = 0.125;
  a.effective_rank = 4;
  a.singular_values = {3.5, 1e-300, 0.0};
  ResultRow b = a;
  b.protocol = "naive_ft+SE@0.5";
  b.fnr.reset();
  b.effective_rank.reset();
  b.singular_values.clear();
  const ResultRow f = ResultRow::failure("s", "frozen_ft", 2);
  std::ostringstream out;
  write_result_csv(out, {a, b, f});
  std::istringstream in(out.str());
  const auto back = read_result_csv(in);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0].overall, a.overall);
  EXPECT_EQ(back[0].seen, a.seen);
  EXPECT_EQ(back[0].seen_chopped, a.seen_chopped);
  EXPECT_EQ(back[0].fnr, a.fnr);
  EXPECT_EQ(back[0].effective_rank, a.effective_rank);
  EXPECT_EQ(back[0].singular_values, a.singular_values);
  EXPECT_EQ(back[1].protocol, b.protocol);
  EXPECT_FALSE(back[1].fnr.has_value());
  EXPECT_FALSE(back[1].effective_rank.has_value());
  EXPECT_TRUE(back[2].failed);
  EXPECT_EQ(back[2].protocol, "frozen_ft");
  EXPECT_EQ(back[2].seed, 2u);
}

TEST(ResultCsv, RejectsBadHeader) {
  std::istringstream empty("");
  EXPECT_THROW(read_result_csv(empty), ValidationError);
  std::istringstream wrong("a,b,c\n");
  EXPECT_THROW(read_result_csv(wrong), ValidationError);
}

TEST(Run, ProducesOneSummaryRowPerCellAndIsReproducible) {
  TempDir tmp;
  const fs::path cfg = write_config(tmp.path(), kTiny);
  const auto first = run_cmd(cfg);
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.out.find("6/6 runs completed"), std::string::npos) << first.out;
  const fs::path res = tmp.path() / "results";
  const std::string summary = slurp(res / "summary.csv");
  const std::string curves = slurp(res / "curves.csv");
  EXPECT_EQ(count_lines(summary), 7u);
  // epochs 0..2 for every cell
  EXPECT_EQ(count_lines(curves), 1u + 6u * 3u);

  // Second run reuses cached sources and must reproduce the tables byte for byte.
  const auto second = run_cmd(cfg);
  ASSERT_EQ(second.code, 0);
  EXPECT_NE(second.out.find("cached"), std::string::npos);
  EXPECT_EQ(slurp(res / "summary.csv"), summary);
  EXPECT_EQ(slurp(res / "curves.csv"), curves);

  fs::remove_all(res);
  ASSERT_EQ(run_cmd(cfg, 3).code, 0);
  EXPECT_EQ(slurp(res / "summary.csv"), summary);
  EXPECT_EQ(slurp(res / "curves.csv"), curves);
}

TEST(Run, DivergingProtocolYieldsFailedRowsAndExitTwo) {
  TempDir tmp;
  const fs::path cfg =
      write_config(tmp.path(), std::string(kTiny) + "\n[protocol.lolsgd]\nlr = 1e300\nepochs = 5\n");
  const auto r = run_cmd(cfg);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("3 run(s) failed"), std::string::npos) << r.err;
  std::ifstream in(tmp.path() / "results" / "summary.csv");
  const auto rows = read_result_csv(in);
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& row : rows) EXPECT_EQ(row.failed, row.protocol == "lolsgd") << row.protocol;

  // The report skips failed cells.
  std::ostringstream out, err;
  ASSERT_EQ(cmd_report(tmp.path() / "results", tmp.path() / "rep", out, err), 0) << err.str();
  EXPECT_NE(out.str().find("3 failed run(s) excluded"), std::string::npos) << out.str();
}

TEST(Run, SeedEnvironmentOverride) {
  TempDir tmp;
  const fs::path cfg = write_config(tmp.path(), kTiny);
  ScopedEnv env("HTLAB_SEED", "5");
  const auto r = run_cmd(cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(tmp.path() / "results" / "summary.csv");
  const auto rows = read_result_csv(in);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) EXPECT_EQ(row.seed, 5u);
}

TEST(Run, InvalidConfigExitsOne) {
  TempDir tmp;
  const auto r = run_cmd(write_config(tmp.path(), "[model]\nhidden = \n"));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(run_cmd(tmp.path() / "missing.ini").code, 1);
}

TEST(Run, EnsembleRowsFollowEachCell) {
  TempDir tmp;
  std::string text = kTiny;
  text.replace(text.find("seeds = 1, 2, 3"), 15, "seeds = 1");
  text += "ensemble_alphas = 0, 0.5\n";
  const auto r = run_cmd(write_config(tmp.path(), text));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(tmp.path() / "results" / "summary.csv");
  const auto rows = read_result_csv(in);
  ASSERT_EQ(rows.size(), 2u * 5u);
  EXPECT_EQ(rows[0].protocol, "naive_ft");
  EXPECT_EQ(rows[1].protocol, "naive_ft+SE@0");
  EXPECT_EQ(rows[2].protocol, "naive_ft+WiSE@0");
  EXPECT_FALSE(rows[1].effective_rank.has_value());
  // alpha = 0 keeps only the fine-tuned model.
  EXPECT_EQ(rows[1].overall, rows[0].overall);
  EXPECT_EQ(rows[2].overall, rows[0].overall);
  EXPECT_EQ(rows[2].effective_rank, rows[0].effective_rank);
}

namespace {

ResultRow summary_row(const std::string& protocol, std::uint64_t seed, double overall) {
  ResultRow r;
  r.scenario_id = "s";
  r.protocol = protocol;
  r.seed = seed;
  r.overall = overall;
  r.seen = overall + 0.1;
  r.unseen = overall - 0.1;
  r.seen_chopped = overall + 0.2;
  r.effective_rank = 5;
  return r;
}

}  // namespace

TEST(Report, SingleSeedOmitsVariance) {
  const auto rep = build_report({summary_row("naive_ft", 1, 0.5), summary_row("lolsgd", 1, 0.625)});
  ASSERT_EQ(rep.protocols.size(), 2u);
  EXPECT_FALSE(rep.protocols[0].has_variance);
  const std::string js = report_to_json(rep);
  EXPECT_EQ(js.find("variance"), std::string::npos);
  std::ostringstream out;
  print_report(out, rep);
  EXPECT_EQ(out.str().find("var "), std::string::npos);
}

TEST(Report, DeltasAgainstNaiveAndBest) {
  const auto rep = build_report({summary_row("naive_ft", 1, 0.5), summary_row("naive_ft", 2, 0.25),
                                 summary_row("lolsgd", 1, 0.75), summary_row("lolsgd", 2, 0.5),
                                 summary_row("frozen_ft", 1, 0.5), summary_row("frozen_ft", 2, 0.5)});
  ASSERT_EQ(rep.protocols.size(), 3u);
  const auto& lol = rep.protocols[1];
  EXPECT_TRUE(lol.has_variance);
  EXPECT_EQ(lol.delta_vs_naive[0].first, "overall");
  EXPECT_EQ(lol.delta_vs_naive[0].second, 0.625 - 0.375);
  EXPECT_EQ(lol.metrics[0].second.variance, 0.015625);
  ASSERT_EQ(rep.best.size(), 4u);
  for (const auto& b : rep.best) EXPECT_EQ(b.protocol, "lolsgd") << b.metric;
}

TEST(Report, JsonRoundTrip) {
  const auto rep = build_report({summary_row("naive_ft", 1, 0.1), summary_row("naive_ft", 2, 0.2),
                                 summary_row("lolsgd", 1, 0.3), summary_row("lolsgd", 2, 1.0 / 3.0),
                                 ResultRow::failure("s", "lolsgd", 3)});
  EXPECT_EQ(rep.failed_cells, 1u);
  EXPECT_EQ(report_from_json(report_to_json(rep)), rep);
  EXPECT_THROW(report_from_json("{}"), ValidationError);
  EXPECT_THROW(report_from_json("not json"), ValidationError);
}

TEST(Report, CommandAcceptsDirectoryOrJson) {
  TempDir tmp;
  {
    std::ofstream out(tmp.path() / "summary.csv");
    write_result_csv(out, {summary_row("naive_ft", 1, 0.5), summary_row("lolsgd", 1, 0.6)});
  }
  std::ostringstream out, err;
  ASSERT_EQ(cmd_report(tmp.path(), tmp.path() / "r1", out, err), 0) << err.str();
  const std::string first = slurp(tmp.path() / "r1" / "report.json");
  ASSERT_EQ(cmd_report(tmp.path() / "r1" / "report.json", tmp.path() / "r2", out, err), 0);
  EXPECT_EQ(slurp(tmp.path() / "r2" / "report.json"), first);
  EXPECT_EQ(cmd_report(tmp.path() / "nothing", tmp.path() / "r3", out, err), 1);
}

TEST(Report, RejectsDuplicateOrEmptySummaries) {
  EXPECT_THROW(build_report({summary_row("lolsgd", 1, 0.5), summary_row("lolsgd", 1, 0.6)}),
               ValidationError);
  EXPECT_THROW(build_report({ResultRow::failure("s", "lolsgd", 1)}), ValidationError);
}
