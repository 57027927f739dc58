// Deterministic numerical primitives shared by every other module.
//
// Everything here is a pure function of its arguments except Rng, which is a
// value type that must not be shared between threads (derive a child
// instead).

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace htlab {

/// Raised for violated preconditions (bad shapes, bad arguments, bad files).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
/// a * b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// Rows of `a` selected by `indices`, in that order.
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> indices);
/// Columns of `a` selected by `indices`, in that order.
Matrix gather_cols(const Matrix& a, std::span<const std::size_t> indices);
/// Per-column mean.
std::vector<double> column_means(const Matrix& a);
/// Rows of `a` vertically stacked on rows of `b`.
Matrix vstack(const Matrix& a, const Matrix& b);

bool all_finite(std::span<const double> xs);

/// Index of the largest entry; the lowest index wins ties.
std::size_t argmax(std::span<const double> xs);

/// Numerically stable softmax (max-subtracted).
std::vector<double> softmax(std::span<const double> logits);
/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Kullback-Leibler divergence sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0 and q
/// clamped below at kKlFloor.
double kl_div(std::span<const double> p, std::span<const double> q);
inline constexpr double kKlFloor = 1e-12;

/// Population covariance (1/N) sum_n (z_n - mean)(z_n - mean)^T.
Matrix covariance(const Matrix& z);

/// Eigenvalues of a symmetric matrix, descending.
std::vector<double> symmetric_eigenvalues(const Matrix& s);

/// Singular values, descending and nonnegative.
struct Spectrum {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const Spectrum&) const = default;
};

/// k largest singular values of the column-centred z, computed as square
/// roots of the eigenvalues of the d x d Gram matrix Zc^T Zc.
Spectrum top_singular_values(const Matrix& z, std::size_t k);

/// Counter-based generator. Output i (0-based) of a stream is
///
///   key   = mix64(seed ^ mix64(stream ^ 0x6a09e667f3bcc909))
///   out_i = mix64(key + (i + 1) * 0x9e3779b97f4a7c15)
///
/// where mix64 is the SplitMix64 finalizer
///
///   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
///   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
///   z =  z ^ (z >> 31)
///
/// i.e. the SplitMix64 sequence started at `key`. derive(tag) keeps the seed
/// and moves to stream mix64(stream + 0x9e3779b97f4a7c15 * (tag + 1)).
/// Reference vector: Rng(0, 0) first output 0x65ae880813f6f3db (pinned in
/// tests/test_numkit.cpp).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (cached second draw).
  double normal();
  /// Uniform integer in [0, n), unbiased (rejection).
  std::size_t uniform_index(std::size_t n);

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(xs[i - 1], xs[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);
  /// k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  Rng derive(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace htlab
