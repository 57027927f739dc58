#include "htlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace htlab {

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(Group g) {
  switch (g) {
    case Group::backbone: return "backbone";
    case Group::classifier: return "classifier";
    case Group::bn_affine: return "bn_affine";
    case Group::bn_stats: return "bn_stats";
    case Group::in_adapter: return "in_adapter";
  }
  return "?";
}

void MlpSpec::validate() const {
  if (layer_widths.size() < 3)
    throw ValidationError("MlpSpec: need input, >= 1 hidden layer and output widths");
  for (auto w : layer_widths)
    if (w == 0) throw ValidationError("MlpSpec: widths must be >= 1");
  if (use_in_adapter && input_dim() < 2)
    throw ValidationError("MlpSpec: IN-adapter needs input dim >= 2");
  if (!(bn_eps > 0.0)) throw ValidationError("MlpSpec: bn_eps must be > 0");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0))
    throw ValidationError("MlpSpec: bn_momentum must lie in [0, 1]");
}

FreezeMask FreezeMask::only(std::initializer_list<Group> groups) {
  FreezeMask m;
  m.trainable.fill(false);
  for (auto g : groups) m.trainable[static_cast<std::size_t>(g)] = true;
  return m;
}

FreezeMask& FreezeMask::freeze(Group g) {
  trainable[static_cast<std::size_t>(g)] = false;
  return *this;
}

FreezeMask& FreezeMask::unfreeze(Group g) {
  trainable[static_cast<std::size_t>(g)] = true;
  return *this;
}

bool FreezeMask::any_trainable() const { return std::ranges::any_of(trainable, std::identity{}); }

// ---------------------------------------------------------------------------
// ModelParams

namespace {

template <typename Ref, typename Params>
std::vector<Ref> collect_tensors(Params& p) {
  std::vector<Ref> out;
  if (p.in_adapter) {
    out.push_back({"in_adapter.scale", Group::in_adapter, false, p.in_adapter->scale});
    out.push_back({"in_adapter.shift", Group::in_adapter, false, p.in_adapter->shift});
  }
  for (std::size_t l = 0; l < p.hidden.size(); ++l) {
    auto& layer = p.hidden[l];
    const std::string prefix = "hidden." + std::to_string(l) + ".";
    out.push_back({prefix + "weight", Group::backbone, true, layer.weight.flat()});
    out.push_back({prefix + "bias", Group::backbone, false, layer.bias});
    if (layer.bn) {
      out.push_back({prefix + "bn.gamma", Group::bn_affine, false, layer.bn->gamma});
      out.push_back({prefix + "bn.beta", Group::bn_affine, false, layer.bn->beta});
      out.push_back({prefix + "bn.running_mean", Group::bn_stats, false, layer.bn->running_mean});
      out.push_back({prefix + "bn.running_var", Group::bn_stats, false, layer.bn->running_var});
    }
  }
  out.push_back({"classifier.weight", Group::classifier, true, p.classifier_weight.flat()});
  out.push_back({"classifier.bias", Group::classifier, false, p.classifier_bias});
  return out;
}

}  // namespace

std::vector<TensorRef> ModelParams::tensors() { return collect_tensors<TensorRef>(*this); }

std::vector<ConstTensorRef> ModelParams::tensors() const {
  return collect_tensors<ConstTensorRef>(*this);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.values.size();
  return n;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (auto& t : z.tensors()) std::ranges::fill(t.values, 0.0);
  return z;
}

void ModelParams::validate() const {
  spec.validate();
  const auto& w = spec.layer_widths;
  const std::size_t L = spec.num_hidden();
  if (hidden.size() != L) throw ValidationError("ModelParams: hidden layer count mismatch");
  if (spec.use_in_adapter != in_adapter.has_value())
    throw ValidationError("ModelParams: IN-adapter presence disagrees with spec");
  if (in_adapter && (in_adapter->scale.size() != w[0] || in_adapter->shift.size() != w[0]))
    throw ValidationError("ModelParams: IN-adapter shape mismatch");
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = hidden[l];
    if (layer.weight.rows() != w[l + 1] || layer.weight.cols() != w[l] ||
        layer.bias.size() != w[l + 1])
      throw ValidationError("ModelParams: hidden layer " + std::to_string(l) + " shape mismatch");
    if (spec.use_batchnorm != layer.bn.has_value())
      throw ValidationError("ModelParams: batch-norm presence disagrees with spec");
    if (layer.bn) {
      const auto& bn = *layer.bn;
      for (const auto* v : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var})
        if (v->size() != w[l + 1]) throw ValidationError("ModelParams: batch-norm shape mismatch");
      for (double v : bn.running_var)
        if (!(v >= 0.0)) throw ValidationError("ModelParams: negative running variance");
    }
  }
  if (classifier_weight.rows() != w.back() || classifier_weight.cols() != w[L] ||
      classifier_bias.size() != w.back())
    throw ValidationError("ModelParams: classifier shape mismatch");
}

ModelParams init_model(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  const auto& w = spec.layer_widths;
  ModelParams p;
  p.spec = spec;
  if (spec.use_in_adapter)
    p.in_adapter = InAdapter{std::vector<double>(w[0], 1.0), std::vector<double>(w[0], 0.0)};
  auto he = [&rng](std::size_t out, std::size_t in) {
    Matrix m(out, in);
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    for (double& v : m.flat()) v = sd * rng.normal();
    return m;
  };
  for (std::size_t l = 0; l < spec.num_hidden(); ++l) {
    HiddenLayer layer;
    layer.weight = he(w[l + 1], w[l]);
    layer.bias.assign(w[l + 1], 0.0);
    if (spec.use_batchnorm) {
      const std::size_t n = w[l + 1];
      layer.bn = BatchNormState{std::vector<double>(n, 1.0), std::vector<double>(n, 0.0),
                                std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};
    }
    p.hidden.push_back(std::move(layer));
  }
  p.classifier_weight = he(w.back(), spec.feature_dim());
  p.classifier_bias.assign(w.back(), 0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Matrix affine(const Matrix& a, const Matrix& weight, std::span<const double> bias) {
  Matrix out = matmul_nt(a, weight);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return out;
}

void activate(Activation act, const Matrix& in, Matrix& out) {
  out = Matrix(in.rows(), in.cols());
  auto src = in.flat();
  auto dst = out.flat();
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::tanh(src[i]);
  }
}

/// Per-column mean and population variance of `m`.
void column_moments(const Matrix& m, std::vector<double>& mean, std::vector<double>& var) {
  mean = column_means(m);
  var.assign(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double d = r[j] - mean[j];
      var[j] += d * d;
    }
  }
  for (double& v : var) v /= static_cast<double>(m.rows());
}

}  // namespace

ForwardTrace forward(const ModelParams& params, const Matrix& x, Mode mode) {
  const auto& spec = params.spec;
  if (x.rows() == 0) throw ValidationError("forward: empty batch");
  if (x.cols() != spec.input_dim())
    throw ValidationError("forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                          std::to_string(spec.input_dim()));
  ForwardTrace tr;
  tr.mode = mode;
  tr.batch = x.rows();
  tr.param_count = params.parameter_count();
  const std::size_t n = x.rows();

  Matrix a;
  if (params.in_adapter) {
    const std::size_t d = x.cols();
    tr.adapter_normalized = Matrix(n, d);
    tr.adapter_inv_std.resize(n);
    a = Matrix(n, d);
    const auto& ad = *params.in_adapter;
    for (std::size_t i = 0; i < n; ++i) {
      auto r = x.row(i);
      double mu = 0.0;
      for (double v : r) mu += v;
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (double v : r) var += (v - mu) * (v - mu);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + spec.bn_eps);
      tr.adapter_inv_std[i] = inv;
      auto xn = tr.adapter_normalized.row(i);
      auto out = a.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        xn[j] = (r[j] - mu) * inv;
        out[j] = ad.scale[j] * xn[j] + ad.shift[j];
      }
    }
  } else {
    a = x;
  }

  for (const auto& layer : params.hidden) {
    LayerTrace lt;
    lt.input = std::move(a);
    lt.pre = affine(lt.input, layer.weight, layer.bias);
    if (layer.bn) {
      const auto& bn = *layer.bn;
      const std::size_t h = lt.pre.cols();
      if (mode == Mode::train) {
        column_moments(lt.pre, lt.batch_mean, lt.batch_var);
      } else {
        lt.batch_mean = bn.running_mean;
        lt.batch_var = bn.running_var;
      }
      lt.inv_std.resize(h);
      for (std::size_t j = 0; j < h; ++j) lt.inv_std[j] = 1.0 / std::sqrt(lt.batch_var[j] + spec.bn_eps);
      lt.normalized = Matrix(n, h);
      lt.post_norm = Matrix(n, h);
      for (std::size_t i = 0; i < n; ++i) {
        auto src = lt.pre.row(i);
        auto nrm = lt.normalized.row(i);
        auto post = lt.post_norm.row(i);
        for (std::size_t j = 0; j < h; ++j) {
          nrm[j] = (src[j] - lt.batch_mean[j]) * lt.inv_std[j];
          post[j] = bn.gamma[j] * nrm[j] + bn.beta[j];
        }
      }
    } else {
      lt.post_norm = lt.pre;
    }
    activate(spec.activation, lt.post_norm, lt.output);
    a = lt.output;
    tr.layers.push_back(std::move(lt));
  }
  tr.features = std::move(a);
  tr.logits = affine(tr.features, params.classifier_weight, params.classifier_bias);
  return tr;
}

// ---------------------------------------------------------------------------
// Backward

Gradients backward(const ModelParams& params, const ForwardTrace& trace, const Matrix& grad_logits,
                   const Matrix* grad_features, const FreezeMask& mask) {
  const auto& spec = params.spec;
  if (trace.mode != Mode::train) throw ValidationError("backward: trace is not from train mode");
  if (trace.param_count != params.parameter_count() || trace.layers.size() != params.hidden.size())
    throw ValidationError("backward: trace/params mismatch");
  if (!grad_logits.same_shape(trace.logits))
    throw ValidationError("backward: gradient shape does not match logits");
  if (grad_features && !grad_features->same_shape(trace.features))
    throw ValidationError("backward: feature gradient shape does not match features");

  const std::size_t n = trace.batch;
  Gradients g = params.zeros_like();

  // Classifier.
  g.classifier_weight = matmul_tn(grad_logits, trace.features);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = grad_logits.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) g.classifier_bias[c] += r[c];
  }
  Matrix grad_a = matmul(grad_logits, params.classifier_weight);
  if (grad_features) {
    auto dst = grad_a.flat();
    auto src = grad_features->flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  const bool need_input_grad = params.in_adapter.has_value() && mask.is_trainable(Group::in_adapter);
  for (std::size_t l = params.hidden.size(); l-- > 0;) {
    const auto& layer = params.hidden[l];
    const auto& lt = trace.layers[l];
    auto& gl = g.hidden[l];
    const std::size_t h = lt.pre.cols();

    // Through the activation.
    Matrix grad_post(n, h);
    {
      auto gp = grad_post.flat();
      auto ga = grad_a.flat();
      if (spec.activation == Activation::relu) {
        auto post = lt.post_norm.flat();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] = post[i] > 0.0 ? ga[i] : 0.0;
      } else {
        auto out = lt.output.flat();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] = ga[i] * (1.0 - out[i] * out[i]);
      }
    }

    // Through batch-norm (train mode: batch statistics depend on the input).
    Matrix grad_pre;
    if (layer.bn) {
      const auto& bn = *layer.bn;
      auto& gbn = *gl.bn;
      std::vector<double> sum_dn(h, 0.0), sum_dn_n(h, 0.0);
      Matrix dn(n, h);
      for (std::size_t i = 0; i < n; ++i) {
        auto gp = grad_post.row(i);
        auto nrm = lt.normalized.row(i);
        auto d = dn.row(i);
        for (std::size_t j = 0; j < h; ++j) {
          gbn.gamma[j] += gp[j] * nrm[j];
          gbn.beta[j] += gp[j];
          d[j] = gp[j] * bn.gamma[j];
          sum_dn[j] += d[j];
          sum_dn_n[j] += d[j] * nrm[j];
        }
      }
      grad_pre = Matrix(n, h);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto d = dn.row(i);
        auto nrm = lt.normalized.row(i);
        auto gpre = grad_pre.row(i);
        for (std::size_t j = 0; j < h; ++j)
          gpre[j] = lt.inv_std[j] * (d[j] - inv_n * sum_dn[j] - nrm[j] * inv_n * sum_dn_n[j]);
      }
    } else {
      grad_pre = std::move(grad_post);
    }

    gl.weight = matmul_tn(grad_pre, lt.input);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = grad_pre.row(i);
      for (std::size_t j = 0; j < h; ++j) gl.bias[j] += r[j];
    }
    if (l > 0 || need_input_grad) grad_a = matmul(grad_pre, layer.weight);
  }

  if (need_input_grad) {
    auto& ga = *g.in_adapter;
    for (std::size_t i = 0; i < n; ++i) {
      auto d = grad_a.row(i);
      auto xn = trace.adapter_normalized.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) {
        ga.scale[j] += d[j] * xn[j];
        ga.shift[j] += d[j];
      }
    }
  }

  for (auto& t : g.tensors())
    if (t.group == Group::bn_stats || !mask.is_trainable(t.group)) std::ranges::fill(t.values, 0.0);
  return g;
}

void update_running_stats(ModelParams& params, const ForwardTrace& trace) {
  if (trace.mode != Mode::train) throw ValidationError("update_running_stats: eval-mode trace");
  if (trace.layers.size() != params.hidden.size())
    throw ValidationError("update_running_stats: trace/params mismatch");
  const double m = params.spec.bn_momentum;
  for (std::size_t l = 0; l < params.hidden.size(); ++l) {
    auto& bn = params.hidden[l].bn;
    if (!bn) continue;
    const auto& lt = trace.layers[l];
    for (std::size_t j = 0; j < bn->running_mean.size(); ++j) {
      bn->running_mean[j] = (1.0 - m) * bn->running_mean[j] + m * lt.batch_mean[j];
      bn->running_var[j] = (1.0 - m) * bn->running_var[j] + m * lt.batch_var[j];
    }
  }
}

ModelParams recompute_bn_stats(const ModelParams& params, const Dataset& data,
                               std::size_t batch_size) {
  if (!params.spec.use_batchnorm) throw ValidationError("recompute_bn_stats: model has no BN layers");
  if (data.empty()) throw ValidationError("recompute_bn_stats: empty dataset");
  if (batch_size == 0) throw ValidationError("recompute_bn_stats: batch_size must be >= 1");
  ModelParams out = params;
  const std::size_t total = data.size();
  for (std::size_t l = 0; l < out.hidden.size(); ++l) {
    const std::size_t h = out.hidden[l].bias.size();
    // Chan et al. pairwise combination of (count, mean, M2).
    std::vector<double> mean(h, 0.0), m2(h, 0.0);
    double count = 0.0;
    for (std::size_t start = 0; start < total; start += batch_size) {
      const std::size_t stop = std::min(total, start + batch_size);
      std::vector<std::size_t> idx(stop - start);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
      const auto tr = forward(out, gather_rows(data.x, idx), Mode::eval);
      const Matrix& pre = tr.layers[l].pre;
      std::vector<double> bmean, bvar;
      column_moments(pre, bmean, bvar);
      const double nb = static_cast<double>(pre.rows());
      const double nt = count + nb;
      for (std::size_t j = 0; j < h; ++j) {
        const double delta = bmean[j] - mean[j];
        mean[j] += delta * nb / nt;
        m2[j] += bvar[j] * nb + delta * delta * count * nb / nt;
      }
      count = nt;
    }
    auto& bn = *out.hidden[l].bn;
    bn.running_mean = mean;
    for (std::size_t j = 0; j < h; ++j) bn.running_var[j] = std::max(m2[j] / count, 0.0);
  }
  return out;
}

namespace {

template <typename Pick>
Matrix predict_batched(const ModelParams& params, const Matrix& x, std::size_t batch_size,
                       std::size_t width, Pick pick) {
  if (batch_size == 0) throw ValidationError("predict: batch_size must be >= 1");
  Matrix out(x.rows(), width);
  for (std::size_t start = 0; start < x.rows(); start += batch_size) {
    const std::size_t stop = std::min(x.rows(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto tr = forward(params, gather_rows(x, idx), Mode::eval);
    const Matrix& m = pick(tr);
    for (std::size_t i = 0; i < idx.size(); ++i) std::ranges::copy(m.row(i), out.row(start + i).begin());
  }
  return out;
}

}  // namespace

Matrix predict_logits(const ModelParams& params, const Matrix& x, std::size_t batch_size) {
  return predict_batched(params, x, batch_size, params.spec.num_classes(),
                         [](const ForwardTrace& t) -> const Matrix& { return t.logits; });
}

Matrix predict_features(const ModelParams& params, const Matrix& x, std::size_t batch_size) {
  return predict_batched(params, x, batch_size, params.spec.feature_dim(),
                         [](const ForwardTrace& t) -> const Matrix& { return t.features; });
}

Matrix chopped_logits(const Matrix& logits, const std::vector<bool>& seen_mask) {
  if (seen_mask.size() != logits.cols())
    throw ValidationError("chopped_logits: mask length != number of classes");
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < seen_mask.size(); ++c)
    if (seen_mask[c]) cols.push_back(c);
  if (cols.empty()) throw ValidationError("chopped_logits: no seen classes");
  return gather_cols(logits, cols);
}

ModelParams params_axpy(double a, const ModelParams& p1, double b, const ModelParams& p2) {
  if (!(p1.spec == p2.spec)) throw ValidationError("params_axpy: spec mismatch");
  ModelParams out = p1;
  auto dst = out.tensors();
  const auto src1 = p1.tensors();
  const auto src2 = p2.tensors();
  if (dst.size() != src2.size()) throw ValidationError("params_axpy: layout mismatch");
  for (std::size_t t = 0; t < dst.size(); ++t) {
    if (src1[t].values.size() != src2[t].values.size())
      throw ValidationError("params_axpy: tensor " + dst[t].name + " shape mismatch");
    auto& out_t = dst[t].values;
    const auto& x = src1[t].values;
    const auto& y = src2[t].values;
    // Zero coefficients drop their term so a*x + 0*y keeps x's signed zeros.
    if (b == 0.0) {
      for (std::size_t i = 0; i < out_t.size(); ++i) out_t[i] = a * x[i];
    } else if (a == 0.0) {
      for (std::size_t i = 0; i < out_t.size(); ++i) out_t[i] = b * y[i];
    } else {
      for (std::size_t i = 0; i < out_t.size(); ++i) out_t[i] = a * x[i] + b * y[i];
    }
  }
  for (auto& layer : out.hidden)
    if (layer.bn)
      for (double& v : layer.bn->running_var) v = std::max(v, 0.0);
  return out;
}

}  // namespace htlab
