#include "htlab/experiment.hpp"

#include "detail/guard.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace htlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kAccuracyMetrics[] = {"overall", "seen", "unseen", "seen_chopped"};
constexpr const char* kNaive = "naive_ft";

std::vector<double> metric_values(const std::vector<const ResultRow*>& rows, const std::string& m) {
  std::vector<double> v;
  for (const auto* r : rows) {
    if (m == "overall") v.push_back(r->overall);
    if (m == "seen") v.push_back(r->seen);
    if (m == "unseen") v.push_back(r->unseen);
    if (m == "seen_chopped") v.push_back(r->seen_chopped);
    if (m == "effective_rank") v.push_back(static_cast<double>(*r->effective_rank));
    if (m == "fnr") v.push_back(*r->fnr);
  }
  return v;
}

const MeanVar* find_metric(const ProtocolStats& s, const std::string& m) {
  for (const auto& [k, v] : s.metrics)
    if (k == m) return &v;
  return nullptr;
}

}  // namespace

bool ExperimentReport::operator==(const ExperimentReport& o) const {
  auto same_stats = [](const ProtocolStats& a, const ProtocolStats& b) {
    if (a.scenario_id != b.scenario_id || a.protocol != b.protocol || a.seeds != b.seeds ||
        a.has_variance != b.has_variance || a.metrics.size() != b.metrics.size() ||
        a.delta_vs_naive != b.delta_vs_naive)
      return false;
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      const auto& [ka, va] = a.metrics[i];
      const auto& [kb, vb] = b.metrics[i];
      if (ka != kb || va.mean != vb.mean || (a.has_variance && va.variance != vb.variance))
        return false;
    }
    return true;
  };
  if (protocols.size() != o.protocols.size() || best.size() != o.best.size() ||
      failed_cells != o.failed_cells)
    return false;
  for (std::size_t i = 0; i < protocols.size(); ++i)
    if (!same_stats(protocols[i], o.protocols[i])) return false;
  for (std::size_t i = 0; i < best.size(); ++i)
    if (best[i].metric != o.best[i].metric || best[i].protocol != o.best[i].protocol ||
        best[i].delta != o.best[i].delta)
      return false;
  return true;
}

ExperimentReport build_report(const std::vector<ResultRow>& summary) {
  ExperimentReport rep;
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<const ResultRow*>> groups;
  for (const auto& r : summary) {
    if (r.failed) {
      ++rep.failed_cells;
      continue;
    }
    const auto key = std::make_pair(r.scenario_id, r.protocol);
    if (!groups.contains(key)) order.push_back(key);
    auto& g = groups[key];
    for (const auto* other : g)
      if (other->seed == r.seed)
        throw ValidationError("summary: duplicate row for " + r.protocol + " seed " +
                              std::to_string(r.seed));
    g.push_back(&r);
  }
  if (order.empty()) throw ValidationError("summary: no completed runs to report");

  for (const auto& key : order) {
    const auto& rows = groups[key];
    ProtocolStats s;
    s.scenario_id = key.first;
    s.protocol = key.second;
    for (const auto* r : rows) s.seeds.push_back(r->seed);
    s.has_variance = rows.size() >= 2;
    std::vector<std::string> names(std::begin(kAccuracyMetrics), std::end(kAccuracyMetrics));
    if (std::ranges::all_of(rows, [](const ResultRow* r) { return r->effective_rank.has_value(); }))
      names.push_back("effective_rank");
    if (std::ranges::all_of(rows, [](const ResultRow* r) { return r->fnr.has_value(); }))
      names.push_back("fnr");
    if (s.has_variance) {
      std::vector<RunReport> reports;
      for (const auto* r : rows) {
        EvalReport e;
        e.overall_acc = r->overall;
        e.seen_acc = r->seen;
        e.unseen_acc = r->unseen;
        e.seen_chopped_acc = r->seen_chopped;
        e.effective_rank = r->effective_rank.value_or(0);
        e.false_negative_rate = r->fnr;
        reports.push_back({r->scenario_id, r->protocol, r->seed, e});
      }
      const AggregateReport agg = aggregate_seeds(reports);
      for (const auto& n : names) s.metrics.emplace_back(n, agg.metric(n));
    } else {
      for (const auto& n : names) s.metrics.emplace_back(n, MeanVar{metric_values(rows, n)[0], 0.0});
    }
    rep.protocols.push_back(std::move(s));
  }

  for (auto& s : rep.protocols) {
    const auto naive = std::ranges::find_if(rep.protocols, [&](const ProtocolStats& o) {
      return o.protocol == kNaive && o.scenario_id == s.scenario_id;
    });
    if (naive == rep.protocols.end()) continue;
    for (const char* m : kAccuracyMetrics)
      s.delta_vs_naive.emplace_back(m, find_metric(s, m)->mean - find_metric(*naive, m)->mean);
  }
  for (std::size_t i = 0; i < std::size(kAccuracyMetrics); ++i) {
    const BestDelta* best = nullptr;
    BestDelta cand;
    for (const auto& s : rep.protocols) {
      if (s.protocol == kNaive || s.delta_vs_naive.empty()) continue;
      const double d = s.delta_vs_naive[i].second;
      if (!best || d > best->delta) {
        cand = {kAccuracyMetrics[i], s.protocol, d};
        best = &cand;
      }
    }
    if (best) rep.best.push_back(cand);
  }
  return rep;
}

std::string report_to_json(const ExperimentReport& rep) {
  json j;
  j["format"] = "htlab-report";
  j["version"] = 1;
  j["failed_cells"] = rep.failed_cells;
  j["protocols"] = json::array();
  for (const auto& s : rep.protocols) {
    json p;
    p["scenario_id"] = s.scenario_id;
    p["protocol"] = s.protocol;
    p["seeds"] = s.seeds;
    json metrics = json::array();
    for (const auto& [name, mv] : s.metrics) {
      json m{{"name", name}, {"mean", mv.mean}};
      if (s.has_variance) m["variance"] = mv.variance;
      metrics.push_back(m);
    }
    p["metrics"] = metrics;
    json deltas = json::array();
    for (const auto& [name, d] : s.delta_vs_naive) deltas.push_back({{"name", name}, {"delta", d}});
    p["delta_vs_naive"] = deltas;
    j["protocols"].push_back(p);
  }
  j["best_delta"] = json::array();
  for (const auto& b : rep.best)
    j["best_delta"].push_back({{"metric", b.metric}, {"protocol", b.protocol}, {"delta", b.delta}});
  return j.dump(2) + "\n";
}

ExperimentReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != "htlab-report") throw ValidationError("not an htlab report");
    ExperimentReport rep;
    rep.failed_cells = j.at("failed_cells").get<std::size_t>();
    for (const auto& p : j.at("protocols")) {
      ProtocolStats s;
      s.scenario_id = p.at("scenario_id").get<std::string>();
      s.protocol = p.at("protocol").get<std::string>();
      s.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
      s.has_variance = s.seeds.size() >= 2;
      for (const auto& m : p.at("metrics"))
        s.metrics.emplace_back(m.at("name").get<std::string>(),
                               MeanVar{m.at("mean").get<double>(), m.value("variance", 0.0)});
      for (const auto& d : p.at("delta_vs_naive"))
        s.delta_vs_naive.emplace_back(d.at("name").get<std::string>(), d.at("delta").get<double>());
      rep.protocols.push_back(std::move(s));
    }
    for (const auto& b : j.at("best_delta"))
      rep.best.push_back({b.at("metric").get<std::string>(), b.at("protocol").get<std::string>(),
                          b.at("delta").get<double>()});
    return rep;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report json: ") + e.what());
  }
}

void print_report(std::ostream& out, const ExperimentReport& rep) {
  char buf[256];
  for (const auto& s : rep.protocols) {
    std::snprintf(buf, sizeof buf, "%-28s seeds=%zu", s.protocol.c_str(), s.seeds.size());
    out << buf;
    for (const auto& [name, mv] : s.metrics) {
      if (s.has_variance)
        std::snprintf(buf, sizeof buf, "  %s %.4f (var %.2e)", name.c_str(), mv.mean, mv.variance);
      else
        std::snprintf(buf, sizeof buf, "  %s %.4f", name.c_str(), mv.mean);
      out << buf;
    }
    out << "\n";
    if (!s.delta_vs_naive.empty() && s.protocol != kNaive) {
      out << "  delta vs naive_ft:";
      for (const auto& [name, d] : s.delta_vs_naive) {
        std::snprintf(buf, sizeof buf, " %s %+.4f", name.c_str(), d);
        out << buf;
      }
      out << "\n";
    }
  }
  for (const auto& b : rep.best) {
    std::snprintf(buf, sizeof buf, "best delta %-13s %+.4f  %s", b.metric.c_str(), b.delta,
                  b.protocol.c_str());
    out << buf << "\n";
  }
  if (rep.failed_cells) out << rep.failed_cells << " failed run(s) excluded\n";
}

int cmd_report(const fs::path& input, const fs::path& out_dir, std::ostream& out,
               std::ostream& err) {
  return detail::guarded(err, [&] {
    ExperimentReport rep;
    if (fs::is_directory(input)) {
      const fs::path summary = input / "summary.csv";
      std::ifstream in(summary);
      if (!in) throw ValidationError("missing " + summary.string());
      rep = build_report(read_result_csv(in));
    } else {
      std::ifstream in(input);
      if (!in) throw ValidationError("cannot read " + input.string());
      std::stringstream ss;
      ss << in.rdbuf();
      rep = report_from_json(ss.str());
    }
    fs::create_directories(out_dir);
    const fs::path path = out_dir / "report.json";
    std::ofstream js(path, std::ios::binary | std::ios::trunc);
    if (!js) throw std::runtime_error("cannot write " + path.string());
    js << report_to_json(rep);
    print_report(out, rep);
    return 0;
  });
}

}  // namespace htlab
