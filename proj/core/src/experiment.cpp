#include "htlab/experiment.hpp"

#include "detail/binary_io.hpp"
#include "detail/guard.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace htlab {

namespace fs = std::filesystem;

namespace {

using KeyValues = std::map<std::string, std::string>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d))
    throw ValidationError(key + ": expected a number, got '" + v + "'");
  return d;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    const auto parsed = detail::parse_indices(v);
    if (parsed.size() == 1 && v.find(',') == std::string::npos) return parsed[0];
  } catch (const ValidationError&) {
  }
  throw ValidationError(key + ": expected a non-negative integer, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw ValidationError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& t : split_list(v)) out.push_back(parse_u64(key, t));
  return out;
}

KeyValues section_values(const std::string& name, const boost::property_tree::ptree& tree,
                         const std::set<std::string>& allowed) {
  KeyValues kv;
  for (const auto& [key, child] : tree) {
    if (!child.empty()) throw ValidationError("[" + name + "]: nested key '" + key + "'");
    if (!allowed.contains(key)) throw ValidationError("[" + name + "]: unknown key '" + key + "'");
    kv[key] = trim(child.data());
  }
  return kv;
}

const std::string* find(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  return it == kv.end() ? nullptr : &it->second;
}

const std::set<std::string> kScenarioKeys{
    "kind",          "id",          "seed",          "classes",        "seen",
    "dim",           "source_per_class", "target_train_per_class", "target_test_per_class",
    "cluster_sep",   "class_sigma", "style_angle",   "style_shift",    "style_noise",
    "pairs",         "pair_overlap", "path",         "source_images",  "source_labels",
    "target_images", "target_labels", "seen_classes", "train_ratio"};
const std::set<std::string> kModelKeys{"hidden",     "activation", "batchnorm",
                                       "in_adapter", "bn_eps",     "bn_momentum"};
const std::set<std::string> kSgdKeys{"lr", "momentum", "weight_decay", "batch_size", "epochs"};
const std::set<std::string> kTrainKeys{
    "lr",          "momentum", "weight_decay", "batch_size",   "epochs",
    "lambda_distill", "lambda_rank", "rank_sign", "subsets",    "leave_k",
    "local_budget", "local_steps", "outer_step", "lol_jobs",   "swa_start"};
const std::set<std::string> kExperimentKeys{"protocols",       "seeds",     "output_dir",
                                            "retain_checkpoints", "ensemble_alphas",
                                            "k_spectrum"};

void apply_sgd(const std::string& sec, const KeyValues& kv, SgdConfig& sgd) {
  if (auto v = find(kv, "lr")) sgd.lr = parse_double(sec + ".lr", *v);
  if (auto v = find(kv, "momentum")) sgd.momentum = parse_double(sec + ".momentum", *v);
  if (auto v = find(kv, "weight_decay")) sgd.weight_decay = parse_double(sec + ".weight_decay", *v);
  if (auto v = find(kv, "batch_size")) sgd.batch_size = parse_u64(sec + ".batch_size", *v);
  if (auto v = find(kv, "epochs")) sgd.epochs = parse_u64(sec + ".epochs", *v);
}

void apply_train(const std::string& sec, const KeyValues& kv, Protocol& p) {
  apply_sgd(sec, kv, p.sgd);
  if (auto v = find(kv, "lambda_distill"))
    p.loss.lambda_distill = parse_double(sec + ".lambda_distill", *v);
  if (auto v = find(kv, "lambda_rank")) p.loss.lambda_rank = parse_double(sec + ".lambda_rank", *v);
  if (auto v = find(kv, "rank_sign")) {
    if (*v == "1" || *v == "+1")
      p.loss.rank_sign = 1;
    else if (*v == "-1")
      p.loss.rank_sign = -1;
    else
      throw ValidationError(sec + ".rank_sign: expected +1 or -1");
  }
  if (auto v = find(kv, "subsets")) p.lol.num_subsets = parse_u64(sec + ".subsets", *v);
  if (auto v = find(kv, "leave_k")) p.lol.leave_k = parse_u64(sec + ".leave_k", *v);
  if (auto v = find(kv, "local_budget")) p.lol.local_budget = parse_double(sec + ".local_budget", *v);
  if (auto v = find(kv, "local_steps")) p.lol.local_steps = parse_u64(sec + ".local_steps", *v);
  if (auto v = find(kv, "outer_step")) p.lol.outer_step = parse_double(sec + ".outer_step", *v);
  if (auto v = find(kv, "lol_jobs")) p.lol.jobs = parse_u64(sec + ".lol_jobs", *v);
  if (auto v = find(kv, "swa_start")) p.swa.start_epoch = parse_u64(sec + ".swa_start", *v);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_relative() && !base.empty() ? base / path : path;
}

void parse_scenario(const KeyValues& kv, const fs::path& base, ScenarioSection& s) {
  const std::string sec = "scenario";
  if (auto v = find(kv, "kind")) {
    if (*v == "synthetic")
      s.source = ScenarioSource::synthetic;
    else if (*v == "toxicity")
      s.source = ScenarioSource::toxicity;
    else if (*v == "import")
      s.source = ScenarioSource::import_dir;
    else if (*v == "idx")
      s.source = ScenarioSource::idx;
    else
      throw ValidationError("scenario.kind: unknown kind '" + *v + "'");
  }
  if (auto v = find(kv, "id")) s.id = *v;
  if (auto v = find(kv, "seed")) s.seed = parse_u64(sec + ".seed", *v);
  if (auto v = find(kv, "classes")) s.num_classes = parse_u64(sec + ".classes", *v);
  if (auto v = find(kv, "seen")) s.num_seen = parse_u64(sec + ".seen", *v);
  if (auto v = find(kv, "dim")) s.dim = parse_u64(sec + ".dim", *v);
  if (auto v = find(kv, "source_per_class"))
    s.per_class.source_train = parse_u64(sec + ".source_per_class", *v);
  if (auto v = find(kv, "target_train_per_class"))
    s.per_class.target_train = parse_u64(sec + ".target_train_per_class", *v);
  if (auto v = find(kv, "target_test_per_class"))
    s.per_class.target_test = parse_u64(sec + ".target_test_per_class", *v);
  if (auto v = find(kv, "cluster_sep")) s.cluster_sep = parse_double(sec + ".cluster_sep", *v);
  if (auto v = find(kv, "class_sigma")) s.class_sigma = parse_double(sec + ".class_sigma", *v);
  if (auto v = find(kv, "style_angle")) s.style_angle = parse_double(sec + ".style_angle", *v);
  if (auto v = find(kv, "style_shift")) s.style_shift = parse_double(sec + ".style_shift", *v);
  if (auto v = find(kv, "style_noise")) s.style_noise = parse_double(sec + ".style_noise", *v);
  if (auto v = find(kv, "pairs")) s.pairs = parse_u64(sec + ".pairs", *v);
  if (auto v = find(kv, "pair_overlap")) s.pair_overlap = parse_double(sec + ".pair_overlap", *v);
  if (auto v = find(kv, "path")) s.path = resolve(base, *v);
  if (auto v = find(kv, "source_images")) s.source_images = resolve(base, *v);
  if (auto v = find(kv, "source_labels")) s.source_labels = resolve(base, *v);
  if (auto v = find(kv, "target_images")) s.target_images = resolve(base, *v);
  if (auto v = find(kv, "target_labels")) s.target_labels = resolve(base, *v);
  if (auto v = find(kv, "seen_classes")) s.seen_classes = parse_size_list(sec + ".seen_classes", *v);
  if (auto v = find(kv, "train_ratio")) s.train_ratio = parse_double(sec + ".train_ratio", *v);
}

void parse_model(const KeyValues& kv, ModelSection& m) {
  if (auto v = find(kv, "hidden")) m.hidden = parse_size_list("model.hidden", *v);
  if (auto v = find(kv, "activation")) m.activation = parse_activation(*v);
  if (auto v = find(kv, "batchnorm")) m.batchnorm = parse_bool("model.batchnorm", *v);
  if (auto v = find(kv, "in_adapter")) m.in_adapter = parse_bool("model.in_adapter", *v);
  if (auto v = find(kv, "bn_eps")) m.bn_eps = parse_double("model.bn_eps", *v);
  if (auto v = find(kv, "bn_momentum")) m.bn_momentum = parse_double("model.bn_momentum", *v);
}

/// Shortest decimal form that parses back to the same double.
std::string fmt_short(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

SyntheticConfig ScenarioSection::synthetic_config() const {
  SyntheticConfig c;
  c.num_classes = num_classes;
  c.num_seen = num_seen;
  c.dim = dim;
  c.per_class = per_class;
  c.cluster_sep = cluster_sep;
  c.class_sigma = class_sigma;
  c.style = StyleTransform::rotation_shift(dim, style_angle, style_shift, style_noise, seed);
  c.seed = seed;
  return c;
}

ToxicityConfig ScenarioSection::toxicity_config() const {
  ToxicityConfig c;
  c.num_pairs = pairs;
  c.dim = dim;
  c.per_class = per_class;
  c.pair_overlap = pair_overlap;
  c.cluster_sep = cluster_sep;
  c.class_sigma = class_sigma;
  c.style = StyleTransform::rotation_shift(dim, style_angle, style_shift, style_noise, seed);
  c.seed = seed;
  return c;
}

MlpSpec ModelSection::spec_for(std::size_t input_dim, std::size_t num_classes) const {
  MlpSpec spec;
  spec.layer_widths.push_back(input_dim);
  spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
  spec.layer_widths.push_back(num_classes);
  spec.activation = activation;
  spec.use_batchnorm = batchnorm;
  spec.use_in_adapter = in_adapter;
  spec.bn_eps = bn_eps;
  spec.bn_momentum = bn_momentum;
  return spec;
}

void ExperimentConfig::validate() const {
  if (protocols.empty()) throw ValidationError("experiment: at least one protocol required");
  if (seeds.empty()) throw ValidationError("experiment: at least one seed required");
  std::set<std::uint64_t> seen_seeds;
  for (auto s : seeds)
    if (!seen_seeds.insert(s).second)
      throw ValidationError("experiment: duplicate seed " + std::to_string(s));
  std::set<ProtocolKind> kinds;
  for (const auto& p : protocols)
    if (!kinds.insert(p.kind).second)
      throw ValidationError("experiment: protocol '" + p.name() + "' listed twice");
  for (double a : ensemble_alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("experiment: ensemble alpha outside [0, 1]");
  if (scenario.id.empty() || scenario.id.find_first_of(",\"\n\r") != std::string::npos)
    throw ValidationError("scenario.id must be nonempty and free of commas and quotes");
  if (model.hidden.empty()) throw ValidationError("model.hidden must list at least one width");
  source.validate();
}

ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ptree_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.output_dir = resolve(base_dir, "results");
  Protocol target_defaults;
  target_defaults.loss = LossSpec{1.0, 3e-6, 1};
  KeyValues target_kv;
  std::map<std::string, KeyValues> overrides;
  std::vector<std::string> protocol_names{"naive_ft", "frozen_ft", "lolsgd", "lolsgd_distill_rank"};

  for (const auto& [name, section] : tree) {
    if (section.empty() && !section.data().empty())
      throw ValidationError("config: key '" + name + "' outside any section");
    if (name == "scenario") {
      parse_scenario(section_values(name, section, kScenarioKeys), base_dir, cfg.scenario);
    } else if (name == "model") {
      parse_model(section_values(name, section, kModelKeys), cfg.model);
    } else if (name == "source") {
      apply_sgd(name, section_values(name, section, kSgdKeys), cfg.source);
    } else if (name == "target") {
      target_kv = section_values(name, section, kTrainKeys);
    } else if (name.starts_with("protocol.")) {
      const std::string proto = name.substr(9);
      parse_protocol_kind(proto);
      overrides[proto] = section_values(name, section, kTrainKeys);
    } else if (name == "experiment") {
      const auto kv = section_values(name, section, kExperimentKeys);
      if (auto v = find(kv, "protocols")) protocol_names = split_list(*v);
      if (auto v = find(kv, "seeds")) {
        cfg.seeds.clear();
        for (const auto& t : split_list(*v)) cfg.seeds.push_back(parse_u64("experiment.seeds", t));
      }
      if (auto v = find(kv, "output_dir")) cfg.output_dir = resolve(base_dir, *v);
      if (auto v = find(kv, "retain_checkpoints"))
        cfg.retain_checkpoints = parse_bool("experiment.retain_checkpoints", *v);
      if (auto v = find(kv, "ensemble_alphas")) {
        cfg.ensemble_alphas.clear();
        for (const auto& t : split_list(*v))
          cfg.ensemble_alphas.push_back(parse_double("experiment.ensemble_alphas", t));
      }
      if (auto v = find(kv, "k_spectrum")) cfg.k_spectrum = parse_u64("experiment.k_spectrum", *v);
    } else {
      throw ValidationError("config: unknown section [" + name + "]");
    }
  }
  apply_train("target", target_kv, target_defaults);
  for (const auto& name : protocol_names) {
    Protocol p = target_defaults;
    p.kind = parse_protocol_kind(name);
    if (auto it = overrides.find(name); it != overrides.end())
      apply_train("protocol." + name, it->second, p);
    cfg.protocols.push_back(p);
  }
  for (const auto& [name, kv] : overrides)
    if (std::ranges::find(protocol_names, name) == protocol_names.end())
      throw ValidationError("config: [protocol." + name + "] is not listed in experiment.protocols");
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path());
}

void apply_seed_override(ExperimentConfig& cfg, const std::string& value) {
  std::vector<std::uint64_t> seeds;
  for (const auto& t : split_list(value)) seeds.push_back(parse_u64("HTLAB_SEED", t));
  if (seeds.empty()) throw ValidationError("HTLAB_SEED: empty seed list");
  cfg.seeds = std::move(seeds);
  cfg.validate();
}

LoadedScenario materialize_scenario(const ScenarioSection& s) {
  switch (s.source) {
    case ScenarioSource::synthetic:
      return {gen_synthetic_scenario(s.synthetic_config()), std::nullopt};
    case ScenarioSource::toxicity: {
      auto [sc, tox] = gen_paired_toxicity_scenario(s.toxicity_config());
      return {std::move(sc), std::move(tox)};
    }
    case ScenarioSource::import_dir:
      if (s.path.empty()) throw ValidationError("scenario.path is required for kind = import");
      return {import_scenario(s.path), import_toxicity(s.path)};
    case ScenarioSource::idx: {
      if (s.source_images.empty() || s.source_labels.empty() || s.target_images.empty() ||
          s.target_labels.empty())
        throw ValidationError("kind = idx needs source_images/labels and target_images/labels");
      Dataset source = load_idx(s.source_images, s.source_labels);
      const Dataset full = load_idx(s.target_images, s.target_labels);
      const IdxImages geometry = read_idx_images(s.target_images);
      const std::size_t c = std::max(source.num_classes, full.num_classes);
      std::vector<std::size_t> seen = s.seen_classes;
      if (seen.empty()) {
        if (s.num_seen == 0 || s.num_seen >= c) throw ValidationError("no unseen classes");
        Rng rng(s.seed, 2);
        seen = rng.sample_without_replacement(c, s.num_seen);
        std::ranges::sort(seen);
      }
      Dataset padded = full;
      padded.num_classes = c;
      SplitFragment frag = make_ht_split(padded, seen, s.train_ratio, s.seed);
      HTScenario sc;
      sc.kind = ScenarioKind::idx;
      sc.seed = s.seed;
      sc.image_rows = geometry.rows;
      sc.image_cols = geometry.cols;
      source.num_classes = c;
      sc.source_train = std::move(source);
      sc.target_train = std::move(frag.target_train);
      sc.target_test = std::move(frag.target_test);
      sc.seen_mask = std::move(frag.seen_mask);
      sc.validate();
      return {std::move(sc), std::nullopt};
    }
  }
  throw ValidationError("unknown scenario kind");
}

// ---------------------------------------------------------------------------
// CSV

ResultRow ResultRow::from_report(std::string scenario_id, std::string protocol, std::uint64_t seed,
                                 std::size_t epoch, const EvalReport& r, bool with_spectrum) {
  ResultRow row;
  row.scenario_id = std::move(scenario_id);
  row.protocol = std::move(protocol);
  row.seed = seed;
  row.epoch = epoch;
  row.overall = r.overall_acc;
  row.seen = r.seen_acc;
  row.unseen = r.unseen_acc;
  row.seen_chopped = r.seen_chopped_acc;
  row.fnr = r.false_negative_rate;
  if (with_spectrum) {
    row.effective_rank = r.effective_rank;
    row.singular_values = r.spectrum.values;
  }
  return row;
}

ResultRow ResultRow::failure(std::string scenario_id, std::string protocol, std::uint64_t seed) {
  ResultRow row;
  row.scenario_id = std::move(scenario_id);
  row.protocol = std::move(protocol);
  row.seed = seed;
  row.failed = true;
  return row;
}

namespace {

constexpr const char* kCsvColumns[] = {"scenario_id", "protocol", "seed",         "epoch",
                                       "overall",     "seen",     "unseen",       "seen_chopped",
                                       "fnr",         "effective_rank"};
constexpr std::size_t kFixedColumns = std::size(kCsvColumns);
constexpr const char* kFailedMarker = "FAILED";

}  // namespace

void write_result_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  std::size_t k = 0;
  for (const auto& r : rows) k = std::max(k, r.singular_values.size());
  for (std::size_t i = 0; i < kFixedColumns; ++i) out << (i ? "," : "") << kCsvColumns[i];
  for (std::size_t j = 1; j <= k; ++j) out << ",sv_" << j;
  out << "\n";
  for (const auto& r : rows) {
    out << r.scenario_id << "," << r.protocol << "," << r.seed << ",";
    if (r.failed) {
      out << kFailedMarker << std::string(kFixedColumns - 4 + k, ',') << "\n";
      continue;
    }
    out << r.epoch << "," << detail::fmt_double(r.overall) << "," << detail::fmt_double(r.seen) << ","
        << detail::fmt_double(r.unseen) << "," << detail::fmt_double(r.seen_chopped) << ",";
    if (r.fnr) out << detail::fmt_double(*r.fnr);
    out << ",";
    if (r.effective_rank) out << *r.effective_rank;
    for (std::size_t j = 0; j < k; ++j) {
      out << ",";
      if (j < r.singular_values.size()) out << detail::fmt_double(r.singular_values[j]);
    }
    out << "\n";
  }
}

std::vector<ResultRow> read_result_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("results csv: missing header");
  auto split = [](const std::string& l) {
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto pos = l.find(',', start);
      f.push_back(l.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return f;
  };
  const auto header = split(line);
  if (header.size() < kFixedColumns) throw ValidationError("results csv: short header");
  for (std::size_t i = 0; i < kFixedColumns; ++i)
    if (header[i] != kCsvColumns[i])
      throw ValidationError("results csv: unexpected column '" + header[i] + "'");
  const std::size_t k = header.size() - kFixedColumns;
  for (std::size_t j = 0; j < k; ++j)
    if (header[kFixedColumns + j] != "sv_" + std::to_string(j + 1))
      throw ValidationError("results csv: unexpected column '" + header[kFixedColumns + j] + "'");

  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line);
    const std::string where = "results csv line " + std::to_string(line_no);
    if (f.size() != header.size()) throw ValidationError(where + ": wrong field count");
    ResultRow r;
    r.scenario_id = f[0];
    r.protocol = f[1];
    r.seed = parse_u64(where + " seed", f[2]);
    if (f[3] == kFailedMarker) {
      r.failed = true;
      rows.push_back(std::move(r));
      continue;
    }
    r.epoch = parse_u64(where + " epoch", f[3]);
    r.overall = parse_double(where + " overall", f[4]);
    r.seen = parse_double(where + " seen", f[5]);
    r.unseen = parse_double(where + " unseen", f[6]);
    r.seen_chopped = parse_double(where + " seen_chopped", f[7]);
    if (!f[8].empty()) r.fnr = parse_double(where + " fnr", f[8]);
    if (!f[9].empty()) r.effective_rank = parse_u64(where + " effective_rank", f[9]);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& v = f[kFixedColumns + j];
      if (v.empty()) break;
      r.singular_values.push_back(parse_double(where + " sv", v));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// gen

namespace {

bool nonempty_dir(const fs::path& p) {
  return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

}  // namespace

int cmd_gen(const GenOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    ScenarioSection section;
    if (opts.config) section = load_experiment_config(*opts.config).scenario;
    if (opts.classes) section.num_classes = *opts.classes;
    if (opts.seen) section.num_seen = *opts.seen;
    if (opts.dim) section.dim = *opts.dim;
    if (opts.seed) section.seed = *opts.seed;
    if (nonempty_dir(opts.out) && !opts.force)
      throw ValidationError("output directory " + opts.out.string() +
                            " is not empty (use --force to overwrite)");
    const LoadedScenario loaded = materialize_scenario(section);
    const HTScenario& sc = loaded.scenario;
    export_scenario(sc, opts.out, loaded.toxicity ? &*loaded.toxicity : nullptr);
    out << "scenario " << opts.out.string() << ": " << sc.num_classes() << " classes ("
        << sc.num_seen() << " seen), dim " << sc.target_test.dim() << ", source_train "
        << sc.source_train.size() << ", target_train " << sc.target_train.size()
        << ", target_test " << sc.target_test.size() << "\n";
    return 0;
  });
}

// ---------------------------------------------------------------------------
// run

namespace {

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (std::size_t w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) body(i);
    });
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fingerprint(const Dataset& d) {
  std::uint64_t h = mix64(d.size() ^ (d.dim() << 32) ^ (d.num_classes << 48));
  for (double v : d.x.flat()) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
  for (auto y : d.y) h = mix64(h ^ y);
  return h;
}

std::string source_key(const MlpSpec& spec, const SgdConfig& sgd, const Dataset& source,
                       std::uint64_t seed) {
  std::ostringstream k;
  k << "seed = " << seed << "\n";
  k << "layer_widths = " << detail::join_indices(spec.layer_widths) << "\n";
  k << "activation = " << to_string(spec.activation) << "\n";
  k << "use_batchnorm = " << spec.use_batchnorm << "\n";
  k << "use_in_adapter = " << spec.use_in_adapter << "\n";
  k << "bn_eps = " << detail::fmt_double(spec.bn_eps) << "\n";
  k << "bn_momentum = " << detail::fmt_double(spec.bn_momentum) << "\n";
  k << "lr = " << detail::fmt_double(sgd.lr) << "\n";
  k << "momentum = " << detail::fmt_double(sgd.momentum) << "\n";
  k << "weight_decay = " << detail::fmt_double(sgd.weight_decay) << "\n";
  k << "batch_size = " << sgd.batch_size << "\n";
  k << "epochs = " << sgd.epochs << "\n";
  k << "source_data = " << hex64(fingerprint(source)) << "\n";
  return k.str();
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

/// Loads the cached source model for `seed` when its key matches, otherwise
/// trains and caches it.
ModelParams obtain_source(const fs::path& dir, const MlpSpec& spec, const SgdConfig& sgd,
                          const HTScenario& sc, std::uint64_t seed, bool& cached) {
  const fs::path ckpt = dir / ("seed_" + std::to_string(seed) + ".ckpt");
  const fs::path key_path = dir / ("seed_" + std::to_string(seed) + ".key");
  const std::string key = source_key(spec, sgd, sc.source_train, seed);
  if (fs::exists(ckpt) && fs::exists(key_path) && read_text(key_path) == key) {
    try {
      ModelParams p = load_checkpoint(ckpt);
      if (p.spec == spec) {
        cached = true;
        return p;
      }
    } catch (const std::exception&) {
    }
  }
  cached = false;
  ModelParams p = pretrain_source(sc.source_train, spec, sgd, seed);
  const fs::path tmp = ckpt.string() + ".tmp";
  save_checkpoint(p, tmp);
  fs::rename(tmp, ckpt);
  write_text_atomic(key_path, key);
  return p;
}

struct CellOutcome {
  bool ok = false;
  bool validation = false;
  std::string error;
};

std::string cell_stem(const Protocol& p, std::uint64_t seed) {
  return p.name() + "__seed_" + std::to_string(seed);
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, std::size_t jobs, std::ostream& log) {
  cfg.validate();
  const LoadedScenario loaded = materialize_scenario(cfg.scenario);
  const HTScenario& sc = loaded.scenario;
  const MlpSpec spec = cfg.model.spec_for(sc.target_test.dim(), sc.num_classes());
  spec.validate();
  for (const auto& p : cfg.protocols) p.validate(spec);
  const ToxicityMap* tox = loaded.toxicity ? &*loaded.toxicity : nullptr;
  TargetTask task = target_task(sc, tox);
  task.k_spectrum = cfg.k_spectrum;

  const fs::path out = cfg.output_dir;
  const fs::path sources_dir = out / "sources";
  const fs::path cells_dir = out / "cells";
  fs::create_directories(sources_dir);
  fs::create_directories(cells_dir);
  std::mutex log_mutex;
  auto say = [&](const std::string& line) {
    std::lock_guard lock(log_mutex);
    log << line << "\n";
  };

  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<std::optional<ModelParams>> sources(n_seeds);
  std::vector<CellOutcome> source_outcomes(n_seeds);
  parallel_for(n_seeds, jobs, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    try {
      bool cached = false;
      sources[i] = obtain_source(sources_dir, spec, cfg.source, sc, seed, cached);
      source_outcomes[i].ok = true;
      say("source seed " + std::to_string(seed) + (cached ? ": cached" : ": trained"));
    } catch (const ValidationError& e) {
      source_outcomes[i] = {false, true, e.what()};
    } catch (const std::exception& e) {
      source_outcomes[i] = {false, false, e.what()};
    }
    if (!source_outcomes[i].ok)
      say("source seed " + std::to_string(seed) + " FAILED: " + source_outcomes[i].error);
  });

  const std::size_t n_cells = cfg.protocols.size() * n_seeds;
  std::vector<CellOutcome> outcomes(n_cells);
  parallel_for(n_cells, jobs, [&](std::size_t c) {
    const Protocol& p = cfg.protocols[c / n_seeds];
    const std::size_t si = c % n_seeds;
    const auto seed = cfg.seeds[si];
    const std::string stem = cell_stem(p, seed);
    CellOutcome& o = outcomes[c];
    if (!source_outcomes[si].ok) {
      o = source_outcomes[si];
      say(stem + " FAILED: source model unavailable");
      return;
    }
    try {
      const ModelParams& source = *sources[si];
      TransferRun run =
          run_protocol(task, source, p, seed, RunOptions{cfg.retain_checkpoints, cfg.scenario.id});
      std::vector<ResultRow> curve;
      for (std::size_t e = 0; e < run.curve.size(); ++e)
        curve.push_back(ResultRow::from_report(cfg.scenario.id, p.name(), seed, e, run.curve[e]));
      std::vector<ResultRow> summary{curve.back()};
      const std::size_t last = run.curve.size() - 1;
      for (double a : cfg.ensemble_alphas) {
        const std::string tag = "@" + fmt_short(a);
        summary.push_back(ResultRow::from_report(cfg.scenario.id, p.name() + "+SE" + tag, seed, last,
                                                 evaluate_se(source, run.final_params, task, a),
                                                 false));
        summary.push_back(ResultRow::from_report(
            cfg.scenario.id, p.name() + "+WiSE" + tag, seed, last,
            evaluate(wise_merge(source, run.final_params, a), *task.test, task.seen_mask, tox,
                     task.k_spectrum)));
      }
      if (cfg.retain_checkpoints) {
        const fs::path ck_dir = cells_dir / stem;
        fs::create_directories(ck_dir);
        for (std::size_t e = 0; e < run.checkpoints.size(); ++e)
          save_checkpoint(run.checkpoints[e], ck_dir / ("epoch_" + std::to_string(e) + ".ckpt"));
      }
      std::ostringstream cs, ss;
      write_result_csv(cs, curve);
      write_result_csv(ss, summary);
      write_text_atomic(cells_dir / (stem + ".curves.csv"), cs.str());
      write_text_atomic(cells_dir / (stem + ".summary.csv"), ss.str());
      o.ok = true;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s: overall %.4f seen %.4f unseen %.4f", stem.c_str(),
                    curve.back().overall, curve.back().seen, curve.back().unseen);
      say(buf);
    } catch (const ValidationError& e) {
      o = {false, true, e.what()};
    } catch (const std::exception& e) {
      o = {false, false, e.what()};
    }
    if (!o.ok) say(stem + " FAILED: " + o.error);
  });

  std::vector<ResultRow> curves, summary;
  RunSummary result;
  result.cells = n_cells;
  bool any_runtime = false;
  for (std::size_t c = 0; c < n_cells; ++c) {
    const Protocol& p = cfg.protocols[c / n_seeds];
    const auto seed = cfg.seeds[c % n_seeds];
    if (!outcomes[c].ok) {
      ++result.failed;
      any_runtime = any_runtime || !outcomes[c].validation;
      summary.push_back(ResultRow::failure(cfg.scenario.id, p.name(), seed));
      continue;
    }
    const std::string stem = cell_stem(p, seed);
    std::ifstream cin(cells_dir / (stem + ".curves.csv"));
    std::ifstream sin(cells_dir / (stem + ".summary.csv"));
    for (auto& r : read_result_csv(cin)) curves.push_back(std::move(r));
    for (auto& r : read_result_csv(sin)) summary.push_back(std::move(r));
  }
  std::ostringstream cs, ss;
  write_result_csv(cs, curves);
  write_result_csv(ss, summary);
  write_text_atomic(out / "curves.csv", cs.str());
  write_text_atomic(out / "summary.csv", ss.str());
  if (result.failed) result.exit_code = any_runtime ? 2 : 1;
  return result;
}

int cmd_run(const fs::path& config_path, const RunCommandOptions& opts, std::ostream& out,
            std::ostream& err) {
  return detail::guarded(err, [&] {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (const char* env = std::getenv("HTLAB_SEED"); env && *env) apply_seed_override(cfg, env);
    if (opts.out) cfg.output_dir = *opts.out;
    const RunSummary r = run_experiment(cfg, opts.jobs, out);
    out << r.cells - r.failed << "/" << r.cells << " runs completed; results in "
        << cfg.output_dir.string() << "\n";
    if (r.failed) err << r.failed << " run(s) failed; see FAILED rows in summary.csv\n";
    return r.exit_code;
  });
}

}  // namespace htlab
