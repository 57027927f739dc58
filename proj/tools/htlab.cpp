#include "htlab/experiment.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"htlab: holistic-transfer experiments on synthetic and IDX scenarios"};
  app.require_subcommand(1);

  htlab::GenOptions gen;
  std::string gen_config;
  std::size_t classes = 0, seen = 0, dim = 0;
  std::uint64_t seed = 0;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a scenario directory");
  gen_cmd->add_option("--config", gen_config, "Config file whose [scenario] section is used");
  auto* o_classes = gen_cmd->add_option("--classes", classes, "Number of classes");
  auto* o_seen = gen_cmd->add_option("--seen", seen, "Number of seen classes");
  auto* o_dim = gen_cmd->add_option("--dim", dim, "Feature dimension");
  auto* o_seed = gen_cmd->add_option("--seed", seed, "Scenario seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  std::string run_config;
  htlab::RunCommandOptions run;
  std::string run_out;
  auto* run_cmd = app.add_subcommand("run", "Run a protocol x seed grid");
  run_cmd->add_option("--config", run_config, "Experiment config")->required();
  run_cmd->add_option("--jobs", run.jobs, "Parallel (protocol, seed) cells")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run_cmd->add_option("--out", run_out, "Override experiment.output_dir");

  std::string report_in, report_out;
  auto* report_cmd = app.add_subcommand("report", "Aggregate summary.csv or report.json");
  report_cmd->add_option("input", report_in, "Results directory or report.json")->required();
  report_cmd->add_option("--out", report_out, "Directory for report.json (default: input dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (*gen_cmd) {
    if (!gen_config.empty()) gen.config = gen_config;
    if (*o_classes) gen.classes = classes;
    if (*o_seen) gen.seen = seen;
    if (*o_dim) gen.dim = dim;
    if (*o_seed) gen.seed = seed;
    return htlab::cmd_gen(gen, std::cout, std::cerr);
  }
  if (*run_cmd) {
    if (!run_out.empty()) run.out = run_out;
    return htlab::cmd_run(run_config, run, std::cout, std::cerr);
  }
  std::filesystem::path in(report_in);
  std::filesystem::path out = report_out;
  if (out.empty()) out = std::filesystem::is_directory(in) ? in : in.parent_path();
  if (out.empty()) out = ".";
  return htlab::cmd_report(in, out, std::cout, std::cerr);
}
