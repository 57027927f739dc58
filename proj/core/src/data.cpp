#include "htlab/data.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace htlab {

// ---------------------------------------------------------------------------
// Dataset

Sample Dataset::sample(std::size_t i) const {
  auto r = x.row(i);
  return {std::vector<double>(r.begin(), r.end()), y[i]};
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.x = gather_rows(x, indices);
  out.y.reserve(indices.size());
  for (auto i : indices) out.y.push_back(y[i]);
  out.num_classes = num_classes;
  return out;
}

std::vector<std::size_t> Dataset::indices_with_labels(const std::vector<bool>& keep) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] < keep.size() && keep[y[i]]) out.push_back(i);
  return out;
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (auto label : y) ++h.at(label);
  return h;
}

Dataset Dataset::from_samples(const std::vector<Sample>& samples, std::size_t num_classes) {
  Dataset d;
  d.num_classes = num_classes;
  const std::size_t dim = samples.empty() ? 0 : samples.front().x.size();
  std::vector<double> flat;
  flat.reserve(samples.size() * dim);
  for (const auto& s : samples) {
    if (s.x.size() != dim) throw ValidationError("Dataset: samples differ in dimension");
    flat.insert(flat.end(), s.x.begin(), s.x.end());
    d.y.push_back(s.y);
  }
  d.x = Matrix(samples.size(), dim, std::move(flat));
  d.validate();
  return d;
}

void Dataset::validate() const {
  if (x.rows() != y.size()) throw ValidationError("Dataset: feature/label count mismatch");
  for (auto label : y)
    if (label >= num_classes)
      throw ValidationError("Dataset: label " + std::to_string(label) + " >= num_classes " +
                            std::to_string(num_classes));
}

// ---------------------------------------------------------------------------
// StyleTransform

StyleTransform::StyleTransform(Matrix a, std::vector<double> b, double noise_sigma)
    : a_(std::move(a)), b_(std::move(b)), noise_sigma_(noise_sigma) {
  if (a_.rows() != a_.cols() || a_.rows() != b_.size())
    throw ValidationError("StyleTransform: A must be d x d and b of length d");
  if (!(noise_sigma_ >= 0.0)) throw ValidationError("StyleTransform: noise_sigma < 0");
  const auto n = static_cast<Eigen::Index>(a_.rows());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      a_.flat().data(), n, n);
  const double det = Eigen::MatrixXd(m).partialPivLu().determinant();
  if (!(std::abs(det) > 1e-9)) throw ValidationError("StyleTransform: A is not invertible");
}

StyleTransform StyleTransform::identity(std::size_t dim) {
  return StyleTransform(Matrix::identity(dim), std::vector<double>(dim, 0.0), 0.0);
}

StyleTransform StyleTransform::rotation_shift(std::size_t dim, double angle, double shift,
                                              double noise_sigma, std::uint64_t seed) {
  Matrix a = Matrix::identity(dim);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t i = 0; i + 1 < dim; i += 2) {
    a(i, i) = c;
    a(i, i + 1) = -s;
    a(i + 1, i) = s;
    a(i + 1, i + 1) = c;
  }
  Rng rng(seed, 0x5717e);
  std::vector<double> b(dim);
  double norm = 0.0;
  for (double& v : b) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : b) v = norm > 0.0 ? v * shift / norm : 0.0;
  return StyleTransform(std::move(a), std::move(b), noise_sigma);
}

std::vector<double> StyleTransform::apply(std::span<const double> x, Rng& rng) const {
  const std::size_t d = dim();
  std::vector<double> out(b_);
  for (std::size_t i = 0; i < d; ++i) {
    auto arow = a_.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += arow[j] * x[j];
    out[i] += s;
  }
  if (noise_sigma_ > 0.0)
    for (double& v : out) v += noise_sigma_ * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// HTScenario

std::size_t HTScenario::num_seen() const {
  return static_cast<std::size_t>(std::ranges::count(seen_mask, true));
}

std::vector<std::size_t> HTScenario::seen_classes() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < seen_mask.size(); ++c)
    if (seen_mask[c]) out.push_back(c);
  return out;
}

std::vector<std::size_t> HTScenario::unseen_classes() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < seen_mask.size(); ++c)
    if (!seen_mask[c]) out.push_back(c);
  return out;
}

void HTScenario::validate() const {
  const std::size_t c = num_classes();
  if (c == 0) throw ValidationError("HTScenario: empty seen_mask");
  for (const Dataset* d : {&source_train, &target_train, &target_test}) {
    d->validate();
    if (d->num_classes != c) throw ValidationError("HTScenario: num_classes disagree");
  }
  if (source_train.dim() != target_train.dim() || target_train.dim() != target_test.dim())
    throw ValidationError("HTScenario: feature dimensions disagree");
  const std::size_t seen = num_seen();
  if (seen == 0) throw ValidationError("HTScenario: no seen classes");
  if (seen == c) throw ValidationError("no unseen classes");
  for (auto label : target_train.y)
    if (!seen_mask[label])
      throw ValidationError("HTScenario: target_train contains unseen class " +
                            std::to_string(label));
  const auto test_hist = target_test.class_histogram();
  const auto src_hist = source_train.class_histogram();
  for (std::size_t k = 0; k < c; ++k) {
    if (test_hist[k] == 0)
      throw ValidationError("HTScenario: target_test missing class " + std::to_string(k));
    if (src_hist[k] == 0)
      throw ValidationError("HTScenario: source_train missing class " + std::to_string(k));
  }
}

bool ToxicityMap::is_toxic(std::size_t c) const {
  return std::ranges::any_of(pairs, [c](const auto& p) { return p.first == c; });
}

bool ToxicityMap::is_non_toxic(std::size_t c) const {
  return std::ranges::any_of(pairs, [c](const auto& p) { return p.second == c; });
}

// ---------------------------------------------------------------------------
// Synthetic generation

Matrix place_class_means(std::size_t num_classes, std::size_t dim, double min_sep, Rng& rng) {
  Matrix means(num_classes, dim);
  for (double& v : means.flat()) v = rng.normal();
  if (num_classes < 2) return means;
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < num_classes; ++i) {
    for (std::size_t j = i + 1; j < num_classes; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = means(i, k) - means(j, k);
        d2 += diff * diff;
      }
      dmin = std::min(dmin, std::sqrt(d2));
    }
  }
  if (!(dmin > 0.0)) throw std::runtime_error("place_class_means: coincident means");
  const double scale = min_sep / dmin;
  for (double& v : means.flat()) v *= scale;
  return means;
}

namespace {

enum StreamTag : std::uint64_t {
  kTagMeans = 1,
  kTagSeen = 2,
  kTagSource = 3,
  kTagTargetTrain = 4,
  kTagTargetTest = 5,
  kTagFullTarget = 6,
  kTagSourceHoldout = 7,
  kTagPairs = 8,
};

void check_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_seen == 0) throw ValidationError("num_seen must be >= 1");
  if (cfg.num_seen >= cfg.num_classes) throw ValidationError("no unseen classes");
  if (cfg.dim < 2) throw ValidationError("dim must be >= 2");
  if (cfg.per_class.source_train == 0 || cfg.per_class.target_train == 0 ||
      cfg.per_class.target_test == 0)
    throw ValidationError("per-class counts must be >= 1");
  if (!(cfg.cluster_sep > 0.0)) throw ValidationError("cluster_sep must be > 0");
  if (!(cfg.class_sigma >= 0.0)) throw ValidationError("class_sigma must be >= 0");
  if (cfg.style && cfg.style->dim() != cfg.dim)
    throw ValidationError("style transform dimension != dim");
}

StyleTransform style_or_identity(const std::optional<StyleTransform>& style, std::size_t dim) {
  return style ? *style : StyleTransform::identity(dim);
}

Dataset draw(const Matrix& means, double sigma, const std::vector<std::size_t>& per_class,
             const StyleTransform* style, Rng& rng) {
  const std::size_t c = means.rows();
  const std::size_t d = means.cols();
  std::size_t total = 0;
  for (auto n : per_class) total += n;
  Dataset out;
  out.num_classes = c;
  out.x = Matrix(total, d);
  out.y.reserve(total);
  std::vector<double> point(d);
  std::size_t row = 0;
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < per_class[k]; ++i, ++row) {
      for (std::size_t j = 0; j < d; ++j) point[j] = means(k, j) + sigma * rng.normal();
      auto dst = out.x.row(row);
      if (style) {
        auto mapped = style->apply(point, rng);
        std::ranges::copy(mapped, dst.begin());
      } else {
        std::ranges::copy(point, dst.begin());
      }
      out.y.push_back(k);
    }
  }
  return out;
}

}  // namespace

SyntheticWorld::SyntheticWorld(const SyntheticConfig& cfg)
    : class_sigma_(cfg.class_sigma), style_(style_or_identity(cfg.style, cfg.dim)) {
  check_synthetic(cfg);
  Rng rng = Rng(cfg.seed).derive(kTagMeans);
  means_ = place_class_means(cfg.num_classes, cfg.dim, cfg.cluster_sep, rng);
}

SyntheticWorld::SyntheticWorld(Matrix means, double class_sigma, StyleTransform style)
    : means_(std::move(means)), class_sigma_(class_sigma), style_(std::move(style)) {
  if (style_.dim() != means_.cols()) throw ValidationError("style transform dimension != dim");
}

Dataset SyntheticWorld::sample_source(const std::vector<std::size_t>& per_class, Rng& rng) const {
  if (per_class.size() != num_classes()) throw ValidationError("per_class length != classes");
  return draw(means_, class_sigma_, per_class, nullptr, rng);
}

Dataset SyntheticWorld::sample_target(const std::vector<std::size_t>& per_class, Rng& rng) const {
  if (per_class.size() != num_classes()) throw ValidationError("per_class length != classes");
  return draw(means_, class_sigma_, per_class, &style_, rng);
}

namespace {

HTScenario assemble(const SyntheticWorld& world, const std::vector<bool>& seen_mask,
                    const PerClassCounts& counts, std::uint64_t seed) {
  const Rng root(seed);
  const std::size_t c = world.num_classes();
  HTScenario sc;
  sc.seed = seed;
  sc.kind = ScenarioKind::synthetic;
  sc.seen_mask = seen_mask;

  Rng src_rng = root.derive(kTagSource);
  sc.source_train = world.sample_source(std::vector<std::size_t>(c, counts.source_train), src_rng);

  std::vector<std::size_t> train_counts(c, 0);
  for (std::size_t k = 0; k < c; ++k)
    if (seen_mask[k]) train_counts[k] = counts.target_train;
  Rng tt_rng = root.derive(kTagTargetTrain);
  sc.target_train = world.sample_target(train_counts, tt_rng);

  Rng te_rng = root.derive(kTagTargetTest);
  sc.target_test = world.sample_target(std::vector<std::size_t>(c, counts.target_test), te_rng);
  sc.validate();
  return sc;
}

}  // namespace

HTScenario gen_synthetic_scenario(const SyntheticConfig& cfg) {
  SyntheticWorld world(cfg);
  Rng seen_rng = Rng(cfg.seed).derive(kTagSeen);
  std::vector<bool> mask(cfg.num_classes, false);
  for (auto k : seen_rng.sample_without_replacement(cfg.num_classes, cfg.num_seen)) mask[k] = true;
  return assemble(world, mask, cfg.per_class, cfg.seed);
}

Dataset gen_full_target_train(const SyntheticConfig& cfg) {
  SyntheticWorld world(cfg);
  Rng rng = Rng(cfg.seed).derive(kTagFullTarget);
  return world.sample_target(std::vector<std::size_t>(cfg.num_classes, cfg.per_class.target_train),
                             rng);
}

Dataset gen_source_holdout(const SyntheticConfig& cfg, std::size_t per_class) {
  SyntheticWorld world(cfg);
  Rng rng = Rng(cfg.seed).derive(kTagSourceHoldout);
  return world.sample_source(std::vector<std::size_t>(cfg.num_classes, per_class), rng);
}

std::pair<HTScenario, ToxicityMap> gen_paired_toxicity_scenario(const ToxicityConfig& cfg) {
  if (cfg.num_pairs == 0) throw ValidationError("num_pairs must be >= 1");
  if (cfg.dim < 2) throw ValidationError("dim must be >= 2");
  if (!(cfg.pair_overlap >= 0.0 && cfg.pair_overlap < 1.0))
    throw ValidationError("pair_overlap must lie in [0, 1)");
  if (!(cfg.cluster_sep > 0.0)) throw ValidationError("cluster_sep must be > 0");
  if (cfg.per_class.source_train == 0 || cfg.per_class.target_train == 0 ||
      cfg.per_class.target_test == 0)
    throw ValidationError("per-class counts must be >= 1");
  if (cfg.style && cfg.style->dim() != cfg.dim)
    throw ValidationError("style transform dimension != dim");

  // Pair anchors are spread so that, with zero overlap, every two classes
  // (within or across pairs) are at least cluster_sep apart.
  const double half_gap = 0.5 * (1.0 - cfg.pair_overlap) * cfg.cluster_sep;
  Rng rng = Rng(cfg.seed).derive(kTagPairs);
  const Matrix anchors = place_class_means(cfg.num_pairs, cfg.dim, 2.0 * cfg.cluster_sep, rng);
  Matrix means(2 * cfg.num_pairs, cfg.dim);
  std::vector<double> dir(cfg.dim);
  for (std::size_t p = 0; p < cfg.num_pairs; ++p) {
    double norm = 0.0;
    for (double& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      const double off = half_gap * dir[j] / norm;
      means(2 * p, j) = anchors(p, j) + off;
      means(2 * p + 1, j) = anchors(p, j) - off;
    }
  }

  SyntheticWorld world(std::move(means), cfg.class_sigma, style_or_identity(cfg.style, cfg.dim));
  ToxicityMap tox;
  std::vector<bool> mask(2 * cfg.num_pairs, false);
  for (std::size_t p = 0; p < cfg.num_pairs; ++p) {
    tox.pairs.emplace_back(2 * p, 2 * p + 1);
    mask[2 * p + 1] = true;
  }
  return {assemble(world, mask, cfg.per_class, cfg.seed), std::move(tox)};
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw ValidationError("truncated IDX header: " + path.string());
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return in;
}

}  // namespace

IdxImages read_idx_images(const std::filesystem::path& path) {
  auto in = open_binary(path);
  if (read_be32(in, path) != kIdxImagesMagic) throw ValidationError("not IDX: " + path.string());
  IdxImages img;
  img.count = read_be32(in, path);
  img.rows = read_be32(in, path);
  img.cols = read_be32(in, path);
  img.pixels.resize(img.count * img.rows * img.cols);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size())))
    throw ValidationError("truncated IDX image data: " + path.string());
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  auto in = open_binary(path);
  if (read_be32(in, path) != kIdxLabelsMagic) throw ValidationError("not IDX: " + path.string());
  std::vector<std::uint8_t> labels(read_be32(in, path));
  if (!in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size())))
    throw ValidationError("truncated IDX label data: " + path.string());
  return labels;
}

void write_idx_images(const std::filesystem::path& path, const IdxImages& images) {
  if (images.pixels.size() != images.count * images.rows * images.cols)
    throw ValidationError("write_idx_images: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.write(reinterpret_cast<const char*>(images.pixels.data()),
            static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto img = read_idx_images(images_path);
  const auto labels = read_idx_labels(labels_path);
  if (labels.size() != img.count)
    throw ValidationError("IDX count mismatch: " + std::to_string(img.count) + " images vs " +
                          std::to_string(labels.size()) + " labels");
  const std::size_t d = img.rows * img.cols;
  Dataset out;
  out.x = Matrix(img.count, d);
  auto flat = out.x.flat();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) flat[i] = img.pixels[i] / 255.0;
  out.y.assign(labels.begin(), labels.end());
  out.num_classes = labels.empty() ? 0 : std::size_t{*std::ranges::max_element(labels)} + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

SplitFragment make_ht_split(const Dataset& full, const std::vector<std::size_t>& seen_classes,
                            double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw ValidationError("train_ratio must lie in (0, 1)");
  if (seen_classes.empty()) throw ValidationError("seen_classes must be nonempty");
  const auto hist = full.class_histogram();
  std::vector<bool> mask(full.num_classes, false);
  for (auto c : seen_classes) {
    if (c >= full.num_classes || hist[c] == 0)
      throw ValidationError("seen class " + std::to_string(c) + " not present in dataset");
    mask[c] = true;
  }
  std::size_t present = 0, unseen_present = 0;
  for (std::size_t c = 0; c < full.num_classes; ++c) {
    if (hist[c] == 0) continue;
    ++present;
    if (!mask[c]) ++unseen_present;
  }
  if (unseen_present == 0) throw ValidationError("no unseen classes");

  std::vector<std::vector<std::size_t>> by_class(full.num_classes);
  for (std::size_t i = 0; i < full.size(); ++i) by_class[full.y[i]].push_back(i);

  SplitFragment frag;
  frag.seen_mask = mask;
  const Rng root(seed);
  for (std::size_t c = 0; c < full.num_classes; ++c) {
    auto& ids = by_class[c];
    if (ids.empty()) continue;
    if (ids.size() < 2) {
      frag.warnings.push_back("class " + std::to_string(c) +
                              " has fewer than 2 samples; all sent to test");
      frag.test_ids.insert(frag.test_ids.end(), ids.begin(), ids.end());
      continue;
    }
    Rng rng = root.derive(c);
    rng.shuffle(ids);
    const auto n = ids.size();
    auto n_train = static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    auto& train_dst = mask[c] ? frag.train_ids : frag.dropped_ids;
    train_dst.insert(train_dst.end(), ids.begin(), ids.begin() + n_train);
    frag.test_ids.insert(frag.test_ids.end(), ids.begin() + n_train, ids.end());
  }
  frag.target_train = full.subset(frag.train_ids);
  frag.target_test = full.subset(frag.test_ids);
  return frag;
}

}  // namespace htlab
