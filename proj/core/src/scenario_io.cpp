// Scenario directory layout
//
//   meta                  key = value text (see export_scenario)
//   synthetic scenarios:  source_train.f64, target_train.f64, target_test.f64
//   idx scenarios:        <split>-images.idx3-ubyte, <split>-labels.idx1-ubyte
//
// .f64 file layout, all integers u64 little-endian:
//
//   offset 0   magic "HTLABF64" (8 bytes)
//   offset 8   version (1)
//   offset 16  rows
//   offset 24  cols
//   offset 32  num_classes
//   offset 40  rows*cols f64 little-endian features, row-major
//   then       rows u64 labels

#include "detail/binary_io.hpp"
#include "htlab/data.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace htlab {

namespace {

constexpr char kF64Magic[8] = {'H', 'T', 'L', 'A', 'B', 'F', '6', '4'};
constexpr std::uint64_t kF64Version = 1;
constexpr const char* kSplits[3] = {"source_train", "target_train", "target_test"};

}  // namespace

void write_f64_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kF64Magic, 8);
  detail::put_u64_le(out, kF64Version);
  detail::put_u64_le(out, data.x.rows());
  detail::put_u64_le(out, data.x.cols());
  detail::put_u64_le(out, data.num_classes);
  for (double v : data.x.flat()) detail::put_f64_le(out, v);
  for (auto label : data.y) detail::put_u64_le(out, label);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset read_f64_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kF64Magic, 8) != 0)
    throw ValidationError("not an htlab f64 dataset: " + path.string());
  if (detail::get_u64_le(in) != kF64Version)
    throw ValidationError("unsupported f64 dataset version: " + path.string());
  const auto rows = detail::get_u64_le(in);
  const auto cols = detail::get_u64_le(in);
  Dataset d;
  d.num_classes = detail::get_u64_le(in);
  d.x = Matrix(rows, cols);
  for (double& v : d.x.flat()) v = detail::get_f64_le(in);
  d.y.resize(rows);
  for (auto& label : d.y) label = detail::get_u64_le(in);
  if (in.peek() != std::char_traits<char>::eof())
    throw ValidationError("trailing bytes in " + path.string());
  if (!all_finite(d.x.flat())) throw ValidationError("non-finite features in " + path.string());
  d.validate();
  return d;
}

namespace {

void write_idx_split(const std::filesystem::path& dir, const std::string& split, const Dataset& d,
                     std::size_t rows, std::size_t cols) {
  if (rows * cols != d.dim()) throw ValidationError("image geometry does not match dim");
  if (d.num_classes > 256) throw ValidationError("IDX labels are u8; too many classes");
  IdxImages img{d.size(), rows, cols, std::vector<std::uint8_t>(d.x.size())};
  auto flat = d.x.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double q = std::round(std::clamp(flat[i], 0.0, 1.0) * 255.0);
    img.pixels[i] = static_cast<std::uint8_t>(q);
  }
  std::vector<std::uint8_t> labels(d.y.begin(), d.y.end());
  write_idx_images(dir / (split + "-images.idx3-ubyte"), img);
  write_idx_labels(dir / (split + "-labels.idx1-ubyte"), labels);
}

}  // namespace

void export_scenario(const HTScenario& sc, const std::filesystem::path& dir,
                     const ToxicityMap* toxicity) {
  sc.validate();
  if (toxicity)
    for (auto [t, n] : toxicity->pairs)
      if (t >= sc.num_classes() || n >= sc.num_classes())
        throw ValidationError("toxicity pair outside the class range");
  std::filesystem::create_directories(dir);
  {
    std::ofstream meta(dir / "meta", std::ios::trunc);
    if (!meta) throw std::runtime_error("cannot write " + (dir / "meta").string());
    meta << "format = htlab-scenario\n"
         << "version = 1\n"
         << "kind = " << (sc.kind == ScenarioKind::synthetic ? "synthetic" : "idx") << "\n"
         << "seed = " << sc.seed << "\n"
         << "num_classes = " << sc.num_classes() << "\n"
         << "dim = " << sc.target_test.dim() << "\n"
         << "seen_mask = " << detail::join_indices(sc.seen_classes()) << "\n"
         << "source_train = " << sc.source_train.size() << "\n"
         << "target_train = " << sc.target_train.size() << "\n"
         << "target_test = " << sc.target_test.size() << "\n";
    if (sc.kind == ScenarioKind::idx)
      meta << "image_rows = " << sc.image_rows << "\n"
           << "image_cols = " << sc.image_cols << "\n";
    if (toxicity) {
      meta << "toxicity_pairs = ";
      for (std::size_t i = 0; i < toxicity->pairs.size(); ++i)
        meta << (i ? "," : "") << toxicity->pairs[i].first << ":" << toxicity->pairs[i].second;
      meta << "\n";
    }
  }
  const Dataset* parts[3] = {&sc.source_train, &sc.target_train, &sc.target_test};
  for (int i = 0; i < 3; ++i) {
    if (sc.kind == ScenarioKind::synthetic)
      write_f64_dataset(dir / (std::string(kSplits[i]) + ".f64"), *parts[i]);
    else
      write_idx_split(dir, kSplits[i], *parts[i], sc.image_rows, sc.image_cols);
  }
}

namespace {

boost::property_tree::ptree read_meta(const std::filesystem::path& dir) {
  namespace pt = boost::property_tree;
  pt::ptree meta;
  try {
    pt::read_ini((dir / "meta").string(), meta);
  } catch (const pt::ptree_error& e) {
    throw ValidationError("cannot read scenario meta in " + dir.string() + ": " + e.what());
  }
  return meta;
}

}  // namespace

std::optional<ToxicityMap> import_toxicity(const std::filesystem::path& dir) {
  const auto meta = read_meta(dir);
  const auto text = meta.get_optional<std::string>("toxicity_pairs");
  if (!text) return std::nullopt;
  const auto c = meta.get<std::size_t>("num_classes");
  ToxicityMap map;
  std::size_t start = 0;
  while (start < text->size()) {
    auto stop = text->find(',', start);
    if (stop == std::string::npos) stop = text->size();
    const std::string item = text->substr(start, stop - start);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("bad toxicity pair '" + item + "'");
    const auto toxic = detail::parse_indices(item.substr(0, colon));
    const auto safe = detail::parse_indices(item.substr(colon + 1));
    if (toxic.size() != 1 || safe.size() != 1 || toxic[0] >= c || safe[0] >= c)
      throw ValidationError("bad toxicity pair '" + item + "'");
    map.pairs.emplace_back(toxic[0], safe[0]);
    start = stop + 1;
  }
  return map;
}

HTScenario import_scenario(const std::filesystem::path& dir) {
  namespace pt = boost::property_tree;
  const pt::ptree meta = read_meta(dir);
  try {
    if (meta.get<std::string>("format") != "htlab-scenario")
      throw ValidationError("not a scenario directory: " + dir.string());
    HTScenario sc;
    const auto kind = meta.get<std::string>("kind");
    if (kind == "synthetic")
      sc.kind = ScenarioKind::synthetic;
    else if (kind == "idx")
      sc.kind = ScenarioKind::idx;
    else
      throw ValidationError("unknown scenario kind '" + kind + "'");
    sc.seed = meta.get<std::uint64_t>("seed");
    const auto c = meta.get<std::size_t>("num_classes");
    sc.seen_mask.assign(c, false);
    for (auto k : detail::parse_indices(meta.get<std::string>("seen_mask"))) {
      if (k >= c) throw ValidationError("seen_mask index out of range");
      sc.seen_mask[k] = true;
    }
    Dataset* parts[3] = {&sc.source_train, &sc.target_train, &sc.target_test};
    for (int i = 0; i < 3; ++i) {
      const std::string split = kSplits[i];
      if (sc.kind == ScenarioKind::synthetic) {
        *parts[i] = read_f64_dataset(dir / (split + ".f64"));
      } else {
        *parts[i] = load_idx(dir / (split + "-images.idx3-ubyte"),
                             dir / (split + "-labels.idx1-ubyte"));
        parts[i]->num_classes = c;
      }
      if (parts[i]->size() != meta.get<std::size_t>(split))
        throw ValidationError("sample count for " + split + " disagrees with meta");
    }
    if (sc.kind == ScenarioKind::idx) {
      sc.image_rows = meta.get<std::size_t>("image_rows");
      sc.image_cols = meta.get<std::size_t>("image_cols");
    }
    sc.validate();
    return sc;
  } catch (const pt::ptree_error& e) {
    throw ValidationError("bad scenario meta in " + dir.string() + ": " + e.what());
  }
}

}  // namespace htlab
