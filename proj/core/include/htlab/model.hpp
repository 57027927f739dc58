// Dense classifier f(x) = g(h(x)): an optional input instance-norm adapter,
// L hidden layers (linear -> optional batch-norm -> activation) forming the
// feature extractor h, and a linear classifier g on top.

#pragma once

#include "htlab/data.hpp"
#include "htlab/numkit.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace htlab {

enum class Activation { relu, tanh };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);

struct MlpSpec {
  /// [d, h_1, ..., h_L, C]
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;
  bool use_batchnorm = false;
  bool use_in_adapter = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t num_classes() const { return layer_widths.back(); }
  std::size_t num_hidden() const { return layer_widths.size() - 2; }
  std::size_t feature_dim() const { return layer_widths[layer_widths.size() - 2]; }

  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

/// Parameter groups addressed by freeze masks.
enum class Group { backbone, classifier, bn_affine, bn_stats, in_adapter };
inline constexpr std::size_t kNumGroups = 5;
std::string_view to_string(Group g);

struct BatchNormState {
  std::vector<double> gamma, beta;
  std::vector<double> running_mean, running_var;

  bool operator==(const BatchNormState&) const = default;
};

struct HiddenLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;
  std::optional<BatchNormState> bn;

  bool operator==(const HiddenLayer&) const = default;
};

struct InAdapter {
  std::vector<double> scale, shift;

  bool operator==(const InAdapter&) const = default;
};

/// One named tensor inside ModelParams.
struct TensorRef {
  std::string name;
  Group group;
  /// Whether weight decay applies (linear weights only).
  bool decays;
  std::span<double> values;
};

struct ConstTensorRef {
  std::string name;
  Group group;
  bool decays;
  std::span<const double> values;
};

struct ModelParams {
  MlpSpec spec;
  std::optional<InAdapter> in_adapter;
  std::vector<HiddenLayer> hidden;
  Matrix classifier_weight;  // C x h_L
  std::vector<double> classifier_bias;

  /// Every tensor in a fixed canonical order (input side first).
  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;
  std::size_t parameter_count() const;

  /// Same spec, every entry zero.
  ModelParams zeros_like() const;

  /// Throws ValidationError if any tensor shape disagrees with `spec`.
  void validate() const;

  bool operator==(const ModelParams&) const = default;
};

/// Gradients share ModelParams' layout. Entries for bn_stats are always zero.
using Gradients = ModelParams;

/// Trainable (true) or frozen (false) per group.
struct FreezeMask {
  std::array<bool, kNumGroups> trainable{true, true, true, true, true};

  static FreezeMask all_trainable() { return {}; }
  static FreezeMask only(std::initializer_list<Group> groups);
  FreezeMask& freeze(Group g);
  FreezeMask& unfreeze(Group g);
  bool is_trainable(Group g) const { return trainable[static_cast<std::size_t>(g)]; }
  bool any_trainable() const;

  bool operator==(const FreezeMask&) const = default;
};

enum class Mode { train, eval };

struct LayerTrace {
  Matrix input;        // a_{l-1}
  Matrix pre;          // W a + b
  Matrix normalized;   // (pre - mean) * inv_std; empty without BN
  Matrix post_norm;    // gamma * normalized + beta, or pre without BN
  Matrix output;       // activation(post_norm)
  std::vector<double> batch_mean, batch_var, inv_std;  // BN only
};

struct ForwardTrace {
  Mode mode = Mode::eval;
  std::size_t batch = 0;
  std::size_t param_count = 0;  // ties the trace to a parameter layout
  Matrix adapter_normalized;    // per-sample standardised input; IN-adapter only
  std::vector<double> adapter_inv_std;
  std::vector<LayerTrace> layers;
  Matrix features;  // penultimate features z, N x h_L
  Matrix logits;    // N x C
};

/// He-style N(0, 2 / fan_in) weights, zero biases, identity normalisers.
ModelParams init_model(const MlpSpec& spec, Rng& rng);

/// Train mode normalises each BN layer with batch statistics; eval mode uses
/// the running statistics. Parameters are never modified here: running
/// statistics are updated by update_running_stats.
ForwardTrace forward(const ModelParams& params, const Matrix& x, Mode mode);

/// Gradient of the batch-mean loss given its gradient at the logits (already
/// carrying the 1/N factor) and optionally an extra gradient at the
/// penultimate features. Frozen groups get exact zeros.
Gradients backward(const ModelParams& params, const ForwardTrace& trace, const Matrix& grad_logits,
                   const Matrix* grad_features, const FreezeMask& mask);

/// running <- (1 - m) running + m batch, for every BN layer, using the batch
/// statistics recorded in a train-mode trace. Variances are population
/// (1/N) variances throughout.
void update_running_stats(ModelParams& params, const ForwardTrace& trace);

/// Replaces running statistics with exact statistics over `data`, layer by
/// layer, each layer computed with the preceding layers already normalised by
/// their recomputed statistics. Equivalent to a train-mode forward over the
/// whole dataset as one batch; streamed in batches of `batch_size`.
ModelParams recompute_bn_stats(const ModelParams& params, const Dataset& data,
                               std::size_t batch_size = 256);

/// Eval-mode logits in batches.
Matrix predict_logits(const ModelParams& params, const Matrix& x, std::size_t batch_size = 512);
/// Eval-mode penultimate features in batches.
Matrix predict_features(const ModelParams& params, const Matrix& x, std::size_t batch_size = 512);

/// Columns of the seen classes, original order.
Matrix chopped_logits(const Matrix& logits, const std::vector<bool>& seen_mask);

/// a * p1 + b * p2 over every tensor including BN statistics; running
/// variances are floored at zero.
ModelParams params_axpy(double a, const ModelParams& p1, double b, const ModelParams& p2);

/// Checkpoint: text header describing the spec and tensor offsets, a line
/// "end_header", then every tensor as little-endian f64 in canonical order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace htlab
