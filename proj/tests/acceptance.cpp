// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.
//
//   htlab_acceptance [--jobs N] [--keep DIR]

#include "htlab/experiment.hpp"

#include "support/oracles.hpp"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>

using namespace htlab;
namespace fs = std::filesystem;

#ifndef HTLAB_SOURCE_DIR
#define HTLAB_SOURCE_DIR "."
#endif

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int g_failures = 0;

void verdict(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("%s c%d %-22s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<ResultRow> read_rows(const fs::path& p) {
  std::ifstream in(p);
  return read_result_csv(in);
}

// ---------------------------------------------------------------------------
// 1. Numerical correctness

// Worst relative error of analytic vs central-difference gradients. Entries
// where both are below 1e-8 (parameters whose effect batch normalisation
// cancels exactly) are compared absolutely instead.
struct GradStats {
  double worst_rel = 0.0;
  double worst_abs_tiny = 0.0;
  void add(double analytic, double numeric) {
    if (std::max(std::abs(analytic), std::abs(numeric)) < 1e-8)
      worst_abs_tiny = std::max(worst_abs_tiny, std::abs(analytic - numeric));
    else
      worst_rel = std::max(worst_rel, oracle::rel_err(analytic, numeric));
  }
  bool ok() const { return worst_rel <= 1e-4 && worst_abs_tiny <= 1e-8; }
};

GradStats check_model_backward() {
  GradStats st;
  for (bool bn : {false, true})
    for (bool adapter : {false, true})
      for (Activation act : {Activation::relu, Activation::tanh}) {
        MlpSpec spec;
        spec.layer_widths = {5, 7, 6, 4};
        spec.activation = act;
        spec.use_batchnorm = bn;
        spec.use_in_adapter = adapter;
        Rng rng(17);
        ModelParams p = init_model(spec, rng);
        for (auto& t : p.tensors())
          if (t.group != Group::bn_stats)
            for (double& v : t.values) v += 0.1 * rng.normal();
        const Matrix x = oracle::random_matrix(rng, 8, spec.input_dim());
        const Matrix g = oracle::random_matrix(rng, 8, spec.num_classes());
        const Matrix h = oracle::random_matrix(rng, 8, spec.feature_dim());
        auto loss = [&] {
          const auto tr = forward(p, x, Mode::train);
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g.flat()[i] * tr.logits.flat()[i];
          for (std::size_t i = 0; i < h.size(); ++i) s += h.flat()[i] * tr.features.flat()[i];
          return s;
        };
        const Gradients grad =
            backward(p, forward(p, x, Mode::train), g, &h, FreezeMask::all_trainable());
        auto gt = grad.tensors();
        auto pt = p.tensors();
        for (std::size_t t = 0; t < pt.size(); ++t) {
          if (pt[t].group == Group::bn_stats) continue;
          const auto num = oracle::numeric_gradient(pt[t].values, loss);
          for (std::size_t i = 0; i < num.size(); ++i) st.add(gt[t].values[i], num[i]);
        }
      }
  return st;
}

GradStats check_loss(const std::function<LossTerm(const Matrix&)>& term, Matrix x) {
  GradStats st;
  const LossTerm at = term(x);
  const auto num = oracle::numeric_gradient(x.flat(), [&] { return term(x).loss; });
  for (std::size_t i = 0; i < num.size(); ++i) st.add(at.grad.flat()[i], num[i]);
  return st;
}

void criterion1() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  const GradStats model = check_model_backward();

  std::vector<std::size_t> labels = {0, 2, 1, 2, 0};
  const GradStats ce = check_loss(
      [&](const Matrix& z) { return cross_entropy(z, labels); }, oracle::random_matrix(rng, 5, 3));

  const std::vector<bool> mask = {true, false, true, false, false};
  const Matrix src = oracle::random_matrix(rng, 6, 5);
  const GradStats distill =
      check_loss([&](const Matrix& z) { return selective_distill(src, z, mask); },
                 oracle::random_matrix(rng, 6, 5));
  const GradStats rank =
      check_loss([](const Matrix& z) { return rank_reg(z); }, oracle::random_matrix(rng, 6, 4));

  // Distillation value against a brute-force restricted KL.
  double kl_err = 0.0;
  {
    const Matrix tgt = oracle::random_matrix(rng, 6, 5);
    double total = 0.0;
    for (std::size_t n = 0; n < 6; ++n) {
      double zs = 0.0, zt = 0.0;
      for (std::size_t c = 0; c < 5; ++c)
        if (!mask[c]) {
          zs += std::exp(src(n, c));
          zt += std::exp(tgt(n, c));
        }
      for (std::size_t c = 0; c < 5; ++c)
        if (!mask[c]) {
          const double ps = std::exp(src(n, c)) / zs, pt = std::exp(tgt(n, c)) / zt;
          total += ps * std::log(ps / pt);
        }
    }
    kl_err = std::abs(selective_distill(src, tgt, mask).loss - total / 6.0);
  }

  // KL nonnegativity and zero at equality over random simplex pairs.
  bool kl_ok = kl_err <= 1e-12;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(6), b(6);
    double sa = 0, sb = 0;
    for (auto& v : a) sa += (v = rng.uniform() + 1e-3);
    for (auto& v : b) sb += (v = rng.uniform() + 1e-3);
    for (auto& v : a) v /= sa;
    for (auto& v : b) v /= sb;
    kl_ok = kl_ok && kl_div(a, b) >= 0.0 && kl_div(a, a) == 0.0;
  }

  // Covariance and rank value against double-loop oracles.
  const Matrix z = oracle::random_matrix(rng, 8, 3);
  const Matrix cov = covariance(z), cov_ref = oracle::naive_covariance(z);
  double cov_err = 0.0;
  for (std::size_t i = 0; i < cov.size(); ++i)
    cov_err = std::max(cov_err, std::abs(cov.flat()[i] - cov_ref.flat()[i]));
  const Matrix zr = oracle::random_matrix(rng, 6, 4);
  const Matrix c = oracle::naive_covariance(zr);
  double rank_ref = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    double d = 0.0;
    for (std::size_t i = 0; i < 4; ++i) d += c(i, j) * c(i, j);
    rank_ref += d * d;
  }
  const double rank_err = std::abs(rank_reg(zr).loss - rank_ref);

  // Spectrum against one-sided Jacobi on the centred matrix.
  const Matrix zs = oracle::random_matrix(rng, 10, 4);
  const auto sv = top_singular_values(zs, 4).values;
  const auto sv_ref = oracle::jacobi_singular_values(oracle::centered(zs));
  const double svd_err = oracle::max_rel_err(sv, sv_ref, 1e-300);

  const double secs = seconds_since(t0);
  const bool pass = model.ok() && ce.ok() && distill.ok() && rank.ok() && kl_ok &&
                    cov_err <= 1e-12 && rank_err <= 1e-12 && svd_err <= 1e-8 && secs < 30.0;
  verdict(1, "numerical-correctness", pass,
          fmt("fd rel err model %.1e ce %.1e distill %.1e rank %.1e (<= 1e-4); kl %.1e cov %.1e "
              "rank %.1e (<= 1e-12); svd %.1e (<= 1e-8); %.1f s (< 30 s)",
              model.worst_rel, ce.worst_rel, distill.worst_rel, rank.worst_rel, kl_err, cov_err,
              rank_err, svd_err, secs));
}

// ---------------------------------------------------------------------------
// 2. LOLSGD degeneracy

void criterion2() {
  const auto t0 = Clock::now();
  MlpSpec spec;
  spec.layer_widths = {6, 16, 12, 5};
  Rng rng(31);
  const ModelParams p0 = init_model(spec, rng);
  Dataset ds;
  ds.num_classes = 5;
  ds.x = oracle::random_matrix(rng, 100, 6);
  for (std::size_t i = 0; i < 100; ++i) ds.y.push_back(i % 5);
  const SgdConfig sgd{0.05, 0.9, 5e-4, 16, 1};
  LolConfig lol;
  lol.num_subsets = 1;
  lol.leave_k = 0;
  lol.local_steps = 1;
  lol.outer_step = 1.0;

  double worst = 0.0;
  bool shape_ok = true;
  for (std::size_t round = 0; round < 5; ++round) {
    ModelParams p = p0;
    const auto info = lolsgd_round(p, ds, Objective{}, sgd, lol, {}, Rng(7), round);
    shape_ok = shape_ok && info.batches.size() == 1 && info.batches[0].size() == 1;
    const auto& ids = info.batches[0][0];
    std::vector<std::size_t> y;
    for (auto i : ids) y.push_back(ds.y[i]);
    ModelParams q = p0;
    MomentumState state;
    sgd_step(q, compute_batch_gradients(q, gather_rows(ds.x, ids), y, Objective{}, {}).grads,
             state, sgd, {});
    auto a = p.tensors();
    auto b = q.tensors();
    for (std::size_t t = 0; t < a.size(); ++t)
      for (std::size_t i = 0; i < a[t].values.size(); ++i)
        worst = std::max(worst, std::abs(a[t].values[i] - b[t].values[i]));
  }
  const double secs = seconds_since(t0);
  verdict(2, "lolsgd-degeneracy", shape_ok && worst <= 1e-12 && secs < 5.0,
          fmt("max |lolsgd_round - sgd_step| %.1e (<= 1e-12) over 5 rounds; %.2f s (< 5 s)",
              worst, secs));
}

// ---------------------------------------------------------------------------
// Experiment tables

struct Means {
  double overall = 0, seen = 0, unseen = 0, er = 0, fnr = 0;
  std::size_t n = 0;
};

// 3-seed means of the final rows per protocol, plus "source" from the
// epoch-0 rows of the first protocol's curves.
std::map<std::string, Means> table(const fs::path& dir) {
  std::map<std::string, Means> m;
  auto add = [&](const std::string& key, const ResultRow& r) {
    Means& x = m[key];
    x.overall += r.overall;
    x.seen += r.seen;
    x.unseen += r.unseen;
    x.er += static_cast<double>(r.effective_rank.value_or(0));
    x.fnr += r.fnr.value_or(0.0);
    ++x.n;
  };
  for (const auto& r : read_rows(dir / "summary.csv"))
    if (!r.failed) add(r.protocol, r);
  const auto curves = read_rows(dir / "curves.csv");
  for (const auto& r : curves)
    if (r.epoch == 0 && r.protocol == curves.front().protocol) add("source", r);
  for (auto& [k, x] : m) {
    const double n = static_cast<double>(x.n);
    x.overall /= n;
    x.seen /= n;
    x.unseen /= n;
    x.er /= n;
    x.fnr /= n;
  }
  return m;
}

bool complete(const std::map<std::string, Means>& m, std::initializer_list<const char*> keys,
              std::size_t seeds) {
  for (const char* k : keys)
    if (!m.contains(k) || m.at(k).n != seeds) return false;
  return true;
}

struct Fixture {
  ExperimentConfig cfg;
  fs::path dir;
  double seconds = 0.0;
  int exit_code = 0;
};

Fixture run_config(const fs::path& config, const fs::path& out, std::size_t jobs) {
  Fixture f;
  f.cfg = load_experiment_config(config);
  f.dir = out;
  RunCommandOptions opts;
  opts.jobs = jobs;
  opts.out = out;
  std::ostringstream log, err;
  const auto t0 = Clock::now();
  f.exit_code = cmd_run(config, opts, log, err);
  f.seconds = seconds_since(t0);
  if (f.exit_code != 0) std::fprintf(stderr, "%s%s", log.str().c_str(), err.str().c_str());
  return f;
}

// ---------------------------------------------------------------------------
// 3-7. Reference scenario

void criteria3to7(const Fixture& ref) {
  const auto m = table(ref.dir);
  const std::size_t seeds = ref.cfg.seeds.size();
  const bool ok = ref.exit_code == 0 &&
                  complete(m,
                           {"source", "naive_ft", "frozen_ft", "sgd_rank", "lolsgd",
                            "lolsgd_distill_rank", "naive_ft+SE@0.5"},
                           seeds);
  if (!ok) {
    for (int c = 3; c <= 7; ++c) verdict(c, "reference-scenario", false, "experiment incomplete");
    return;
  }
  const Means &src = m.at("source"), &naive = m.at("naive_ft"), &frozen = m.at("frozen_ft"),
              &lol = m.at("lolsgd"), &ldr = m.at("lolsgd_distill_rank"),
              &frozen_rank = m.at("sgd_rank"), &se = m.at("naive_ft+SE@0.5");

  const double drop = src.unseen - naive.unseen;
  verdict(3, "forgetting", drop >= 0.20 && ref.seconds < 180.0,
          fmt("source unseen %.4f, naive_ft unseen %.4f, drop %.4f (>= 0.20); "
              "full grid %.1f s (< 180 s)",
              src.unseen, naive.unseen, drop, ref.seconds));

  const double gap = frozen.unseen - naive.unseen;
  verdict(4, "frozen-classifier", gap >= 0.10,
          fmt("frozen_ft unseen %.4f - naive_ft unseen %.4f = %.4f (>= 0.10)", frozen.unseen,
              naive.unseen, gap));

  const bool order = ldr.unseen >= lol.unseen && lol.unseen >= frozen.unseen &&
                     frozen.unseen > naive.unseen;
  const bool win = ldr.overall >= src.overall;
  verdict(5, "method-ordering", order && win && ref.seconds < 900.0,
          fmt("unseen ldr %.4f >= lolsgd %.4f >= frozen %.4f > naive %.4f: %s; "
              "ldr overall %.4f >= source %.4f: %s; %.1f s (< 900 s)",
              ldr.unseen, lol.unseen, frozen.unseen, naive.unseen, order ? "yes" : "no",
              ldr.overall, src.overall, win ? "yes" : "no", ref.seconds));

  verdict(6, "rank-collapse", naive.er <= src.er && frozen_rank.er >= naive.er,
          fmt("effective rank naive_ft %.2f <= source %.2f, frozen_ft+rank %.2f >= naive_ft %.2f",
              naive.er, src.er, frozen_rank.er, naive.er));

  // Endpoints: rerun naive_ft per seed from an independently trained source.
  const LoadedScenario loaded = materialize_scenario(ref.cfg.scenario);
  const HTScenario& sc = loaded.scenario;
  const MlpSpec spec = ref.cfg.model.spec_for(sc.target_test.dim(), sc.num_classes());
  const TargetTask task = target_task(sc);
  Protocol naive_p;
  for (const auto& p : ref.cfg.protocols)
    if (p.kind == ProtocolKind::naive_ft) naive_p = p;
  bool endpoints = true;
  auto same_acc = [](const EvalReport& a, const EvalReport& b) {
    return a.overall_acc == b.overall_acc && a.seen_acc == b.seen_acc &&
           a.unseen_acc == b.unseen_acc && a.seen_chopped_acc == b.seen_chopped_acc;
  };
  for (auto seed : ref.cfg.seeds) {
    const ModelParams source = pretrain_source(sc, spec, ref.cfg.source, seed);
    const ModelParams target = run_protocol(task, source, naive_p, seed).final_params;
    const EvalReport es = evaluate(source, *task.test, task.seen_mask);
    const EvalReport et = evaluate(target, *task.test, task.seen_mask);
    endpoints = endpoints && same_acc(evaluate_se(source, target, task, 1.0), es) &&
                same_acc(evaluate_se(source, target, task, 0.0), et) &&
                same_acc(evaluate(wise_merge(source, target, 1.0), *task.test, task.seen_mask), es) &&
                same_acc(evaluate(wise_merge(source, target, 0.0), *task.test, task.seen_mask), et);
  }
  verdict(7, "ensemble-endpoints", endpoints && se.unseen > naive.unseen,
          fmt("SE/WiSE alpha=1 == source and alpha=0 == naive_ft exactly: %s; "
              "SE@0.5 unseen %.4f > naive_ft unseen %.4f",
              endpoints ? "yes" : "no", se.unseen, naive.unseen));
}

// ---------------------------------------------------------------------------
// 8. Toxicity

void criterion8(const Fixture& tox) {
  const auto m = table(tox.dir);
  if (tox.exit_code != 0 ||
      !complete(m, {"source", "naive_ft", "lolsgd_distill_rank"}, tox.cfg.seeds.size())) {
    verdict(8, "false-negatives", false, "experiment incomplete");
    return;
  }
  const double s = m.at("source").fnr, n = m.at("naive_ft").fnr,
               l = m.at("lolsgd_distill_rank").fnr;
  verdict(8, "false-negatives", n >= s && l <= n,
          fmt("FNR naive_ft %.4f >= source %.4f, lolsgd_distill_rank %.4f <= naive_ft %.4f", n, s,
              l, n));
}

// ---------------------------------------------------------------------------
// 9. Determinism and bookkeeping

void criterion9(const Fixture& ref, const fs::path& config, const fs::path& scratch) {
  // Rerun into the same directory (cached sources) and into a fresh one
  // with a single worker.
  const std::string first = slurp(ref.dir / "summary.csv");
  const Fixture again = run_config(config, ref.dir, 4);
  const bool cached_same = again.exit_code == 0 && slurp(ref.dir / "summary.csv") == first;
  const Fixture fresh = run_config(config, scratch / "reference_serial", 1);
  const bool fresh_same = fresh.exit_code == 0 && slurp(fresh.dir / "summary.csv") == first &&
                          slurp(fresh.dir / "curves.csv") == slurp(ref.dir / "curves.csv");

  const LoadedScenario loaded = materialize_scenario(ref.cfg.scenario);
  const HTScenario& sc = loaded.scenario;
  const MlpSpec spec = ref.cfg.model.spec_for(sc.target_test.dim(), sc.num_classes());
  std::map<std::uint64_t, ResultRow> expected;
  for (auto seed : ref.cfg.seeds) {
    const ModelParams source = pretrain_source(sc, spec, ref.cfg.source, seed);
    expected[seed] = ResultRow::from_report(
        ref.cfg.scenario.id, "", seed, 0,
        evaluate(source, sc.target_test, sc.seen_mask, nullptr, ref.cfg.k_spectrum));
  }
  std::size_t curves = 0, matching = 0;
  for (const auto& r : read_rows(ref.dir / "curves.csv")) {
    if (r.epoch != 0) continue;
    ++curves;
    const ResultRow& e = expected.at(r.seed);
    matching += r.overall == e.overall && r.seen == e.seen && r.unseen == e.unseen &&
                r.seen_chopped == e.seen_chopped && r.effective_rank == e.effective_rank &&
                r.singular_values == e.singular_values;
  }
  const std::size_t cells = ref.cfg.protocols.size() * ref.cfg.seeds.size();
  verdict(9, "determinism", cached_same && fresh_same && curves == cells && matching == curves,
          fmt("summary.csv byte-identical on rerun: %s, fresh serial run: %s; "
              "epoch-0 rows equal source eval: %zu/%zu curves",
              cached_same ? "yes" : "no", fresh_same ? "yes" : "no", matching, cells));
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  std::optional<fs::path> keep;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--jobs") && i + 1 < argc)
      jobs = std::stoul(argv[++i]);
    else if (!std::strcmp(argv[i], "--keep") && i + 1 < argc)
      keep = argv[++i];
    else {
      std::fprintf(stderr, "usage: %s [--jobs N] [--keep DIR]\n", argv[0]);
      return 2;
    }
  }
  const fs::path scratch =
      keep ? *keep
           : fs::temp_directory_path() / ("htlab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  const fs::path configs = fs::path(HTLAB_SOURCE_DIR) / "configs";

  try {
    criterion1();
    criterion2();
    const Fixture ref = run_config(configs / "reference.ini", scratch / "reference", jobs);
    criteria3to7(ref);
    criterion8(run_config(configs / "toxicity.ini", scratch / "toxicity", jobs));
    criterion9(ref, configs / "reference.ini", scratch);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    ++g_failures;
  }
  if (!keep) fs::remove_all(scratch);
  std::printf("%s: %d criterion(s) failed\n", g_failures ? "FAIL" : "PASS", g_failures);
  return g_failures ? 1 : 0;
}
