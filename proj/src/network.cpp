#include "mtaesth/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <string>

#include "mtaesth/errors.hpp"
#include "mtaesth/kvfile.hpp"
#include "mtaesth/rng.hpp"

namespace mtaesth {

// ---------------------------------------------------------------------------
// LayerSpec
// ---------------------------------------------------------------------------

LayerSpec LayerSpec::conv(std::size_t filter, std::size_t channels,
                          std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::kConvolution;
  s.filter = filter;
  s.stride = stride;
  s.channels = channels;
  return s;
}

LayerSpec LayerSpec::pool(std::size_t window, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::kMaxPool;
  s.filter = window;
  s.stride = stride == 0 ? window : stride;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::kDense;
  s.units = units;
  s.bias = bias;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::kRelu;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::kFlatten;
  return s;
}

std::string LayerSpec::to_string() const {
  std::ostringstream o;
  switch (kind) {
    case LayerKind::kConvolution:
      o << "conv:" << filter << ":" << stride << ":" << channels;
      break;
    case LayerKind::kMaxPool:
      o << "pool:" << filter << ":" << stride;
      break;
    case LayerKind::kDense:
      o << "dense:" << units << ":" << (bias ? 1 : 0);
      break;
    case LayerKind::kRelu:
      o << "relu";
      break;
    case LayerKind::kFlatten:
      o << "flatten";
      break;
  }
  return o.str();
}

LayerSpec LayerSpec::from_string(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  auto num = [&](std::size_t i) -> std::size_t {
    return static_cast<std::size_t>(std::stoul(parts.at(i)));
  };
  if (parts[0] == "conv" && parts.size() == 4)
    return conv(num(1), num(3), num(2));
  if (parts[0] == "pool" && parts.size() == 3) return pool(num(1), num(2));
  if (parts[0] == "dense" && parts.size() == 3)
    return dense(num(1), num(2) != 0);
  if (parts[0] == "relu" && parts.size() == 1) return relu();
  if (parts[0] == "flatten" && parts.size() == 1) return flatten();
  throw config_error("bad layer spec '" + s + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kMtcnn1:
      return "mtcnn1";
    case Variant::kMtcnn2:
      return "mtcnn2";
    case Variant::kMtcnn3:
      return "mtcnn3";
    case Variant::kEnhanced:
      return "enhanced";
  }
  return "mtcnn1";
}

Variant variant_from_name(const std::string& name) {
  if (name == "mtcnn1") return Variant::kMtcnn1;
  if (name == "mtcnn2") return Variant::kMtcnn2;
  if (name == "mtcnn3") return Variant::kMtcnn3;
  if (name == "enhanced") return Variant::kEnhanced;
  throw config_error("unknown variant '" + name +
                     "' (expected mtcnn1|mtcnn2|mtcnn3|enhanced)");
}

namespace {

std::string join_specs(const std::vector<LayerSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) out += ";";
    out += specs[i].to_string();
  }
  return out;
}

std::vector<LayerSpec> parse_specs(const std::string& s) {
  std::vector<LayerSpec> out;
  std::string cur;
  for (char c : s) {
    if (c == ';') {
      if (!cur.empty()) out.push_back(LayerSpec::from_string(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(LayerSpec::from_string(cur));
  return out;
}

}  // namespace

std::string ArchitectureConfig::serialize() const {
  std::ostringstream o;
  o << "variant = " << variant_name(variant) << "\n";
  o << "input = " << input_h << "x" << input_w << "x" << input_c << "\n";
  o << "classes = " << classes << "\n";
  o << "attributes = " << attributes << "\n";
  o << "theta1_layers = " << theta1_layers << "\n";
  o << "trunk = " << join_specs(trunk) << "\n";
  o << "aesthetic_head = " << join_specs(aesthetic_head) << "\n";
  o << "semantic_head = " << join_specs(semantic_head) << "\n";
  o << "aux_head = " << join_specs(aux_head) << "\n";
  return o.str();
}

ArchitectureConfig ArchitectureConfig::deserialize(const std::string& text) {
  KvFile kv = KvFile::parse_text(text, "<architecture>");
  ArchitectureConfig c;
  c.variant = variant_from_name(kv.get("variant"));
  const std::string in = kv.get("input");
  if (std::sscanf(in.c_str(), "%zux%zux%zu", &c.input_h, &c.input_w,
                  &c.input_c) != 3) {
    throw config_error("bad input shape '" + in + "'");
  }
  c.classes = static_cast<std::size_t>(kv.get_int("classes"));
  c.attributes = static_cast<std::size_t>(kv.get_int("attributes"));
  c.theta1_layers = static_cast<std::size_t>(kv.get_int("theta1_layers"));
  c.trunk = parse_specs(kv.get("trunk"));
  c.aesthetic_head = parse_specs(kv.get("aesthetic_head"));
  c.semantic_head = parse_specs(kv.get("semantic_head"));
  c.aux_head = parse_specs(kv.get("aux_head"));
  return c;
}

ArchitectureConfig default_architecture(Variant variant, std::size_t input_h,
                                        std::size_t input_w,
                                        std::size_t input_c,
                                        std::size_t classes,
                                        std::size_t attributes,
                                        const ArchitectureScale& scale) {
  if (scale.conv_channels.size() != 4 || scale.conv_filters.size() != 4 ||
      scale.dense_units.size() != 2) {
    throw config_error(
        "architecture scale needs 4 conv channel counts, 4 conv filter sizes "
        "and 2 dense widths");
  }
  const auto& cc = scale.conv_channels;
  const auto& cf = scale.conv_filters;
  const auto& du = scale.dense_units;

  const std::vector<LayerSpec> early = {
      LayerSpec::conv(cf[0], cc[0]), LayerSpec::relu(), LayerSpec::pool(2),
      LayerSpec::conv(cf[1], cc[1]), LayerSpec::relu(), LayerSpec::pool(2)};
  const std::vector<LayerSpec> late_convs = {
      LayerSpec::conv(cf[2], cc[2]), LayerSpec::relu(),
      LayerSpec::conv(cf[3], cc[3]), LayerSpec::relu()};
  const std::vector<LayerSpec> fc = {
      LayerSpec::flatten(),       LayerSpec::dense(du[0]), LayerSpec::relu(),
      LayerSpec::dense(du[1]),    LayerSpec::relu()};

  auto cat = [](std::initializer_list<const std::vector<LayerSpec>*> lists) {
    std::vector<LayerSpec> out;
    for (const auto* l : lists) out.insert(out.end(), l->begin(), l->end());
    return out;
  };

  ArchitectureConfig c;
  c.variant = variant;
  c.input_h = input_h;
  c.input_w = input_w;
  c.input_c = input_c;
  c.classes = classes;
  c.attributes = attributes;

  switch (variant) {
    case Variant::kMtcnn1:
      c.trunk = cat({&early, &late_convs, &fc});
      c.aesthetic_head = {LayerSpec::dense(classes, false)};
      c.semantic_head = {LayerSpec::dense(attributes, false)};
      break;
    case Variant::kMtcnn2:
      // split right after the convolutional trunk
      c.trunk = cat({&early, &late_convs});
      c.trunk.push_back(LayerSpec::flatten());
      c.aesthetic_head = {LayerSpec::dense(du[0]), LayerSpec::relu(),
                          LayerSpec::dense(du[1]), LayerSpec::relu(),
                          LayerSpec::dense(classes, false)};
      c.semantic_head = {LayerSpec::dense(du[0]), LayerSpec::relu(),
                         LayerSpec::dense(du[1]), LayerSpec::relu(),
                         LayerSpec::dense(attributes, false)};
      break;
    case Variant::kMtcnn3:
      // only the first two convolutional layers are shared
      c.trunk = early;
      c.aesthetic_head = {LayerSpec::flatten(), LayerSpec::dense(du[1]),
                          LayerSpec::relu(), LayerSpec::dense(classes, false)};
      c.semantic_head = cat({&late_convs, &fc});
      c.semantic_head.push_back(LayerSpec::dense(attributes, false));
      break;
    case Variant::kEnhanced:
      c.trunk = cat({&early, &late_convs, &fc});
      c.theta1_layers = early.size();
      c.aesthetic_head = {LayerSpec::dense(classes, false)};
      c.semantic_head = {LayerSpec::dense(attributes, false)};
      c.aux_head = {LayerSpec::flatten(), LayerSpec::dense(classes, false)};
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

std::size_t ParamStore::add(ParamTensor t) {
  t.grad.assign(t.value.size(), 0.0);
  tensors_.push_back(std::move(t));
  return tensors_.size() - 1;
}

const ParamTensor* ParamStore::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return &t;
  return nullptr;
}

ParamTensor* ParamStore::find(const std::string& name) {
  for (auto& t : tensors_)
    if (t.name == name) return &t;
  return nullptr;
}

std::size_t ParamStore::total_params() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

void ParamStore::set_task_heads(std::size_t aesthetic_idx,
                                std::size_t semantic_idx,
                                std::optional<std::size_t> aux_idx) {
  head_aesthetic_ = aesthetic_idx;
  head_semantic_ = semantic_idx;
  head_aux_ = aux_idx;
}

Matrix ParamStore::task_matrix(bool include_aux) const {
  const ParamTensor& wa = tensors_[head_aesthetic_];
  const ParamTensor& ws = tensors_[head_semantic_];
  const std::size_t d = wa.shape[0];
  const std::size_t c = wa.shape[1];
  const std::size_t m = ws.shape[1];
  if (ws.shape[0] != d) {
    throw config_error("task heads have mismatched input widths: " +
                       std::to_string(d) + " vs " +
                       std::to_string(ws.shape[0]));
  }
  std::size_t aux_cols = 0;
  const ParamTensor* waux = nullptr;
  if (include_aux) {
    if (!head_aux_) {
      throw config_error("no auxiliary head to include in the task matrix");
    }
    waux = &tensors_[*head_aux_];
    if (waux->shape[0] != d) {
      throw config_error(
          "auxiliary head width " + std::to_string(waux->shape[0]) +
          " does not match the shared representation width " +
          std::to_string(d) + "; it cannot join the task matrix");
    }
    aux_cols = waux->shape[1];
  }
  Matrix w(d, aux_cols + c + m);
  for (std::size_t i = 0; i < d; ++i) {
    std::size_t j = 0;
    if (waux) {
      for (std::size_t k = 0; k < aux_cols; ++k)
        w(i, j++) = waux->value[i * aux_cols + k];
    }
    for (std::size_t k = 0; k < c; ++k) w(i, j++) = wa.value[i * c + k];
    for (std::size_t k = 0; k < m; ++k) w(i, j++) = ws.value[i * m + k];
  }
  return w;
}

void ParamStore::add_task_matrix_grad(const Matrix& g, bool include_aux) {
  ParamTensor& wa = tensors_[head_aesthetic_];
  ParamTensor& ws = tensors_[head_semantic_];
  const std::size_t d = wa.shape[0];
  const std::size_t c = wa.shape[1];
  const std::size_t m = ws.shape[1];
  ParamTensor* waux = nullptr;
  std::size_t aux_cols = 0;
  if (include_aux) {
    waux = &tensors_[*head_aux_];
    aux_cols = waux->shape[1];
  }
  if (g.rows != d || g.cols != aux_cols + c + m) {
    throw input_error("task matrix gradient has wrong shape");
  }
  for (std::size_t i = 0; i < d; ++i) {
    std::size_t j = 0;
    if (waux) {
      for (std::size_t k = 0; k < aux_cols; ++k)
        waux->grad[i * aux_cols + k] += g(i, j++);
    }
    for (std::size_t k = 0; k < c; ++k) wa.grad[i * c + k] += g(i, j++);
    for (std::size_t k = 0; k < m; ++k) ws.grad[i * m + k] += g(i, j++);
  }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

class Layer {
 public:
  virtual ~Layer() = default;

  /// Validates and returns the output shape; throws config_error on
  /// inconsistent geometry.
  virtual Shape3 infer_shape(Shape3 in) = 0;

  virtual void init_params(ParamStore&, ParamGroup, const std::string&,
                            Rng&) {}

  virtual void forward(const ParamStore& params, const Tensor& in, Tensor& out,
                       std::vector<std::int32_t>* argmax) const = 0;

  /// Accumulates parameter gradients; fills `din` (if non-null) with the
  /// input gradient.
  virtual void backward(ParamStore& params, const Tensor& in,
                        const std::vector<std::int32_t>& argmax,
                        const Tensor& dout, Tensor* din) const = 0;

  /// Linear push-forward of an activation difference along the frozen
  /// graph (bias-free, relu mask and pool argmax pinned by the trace).
  virtual void forward_delta(const ParamStore& params, const Tensor& delta_in,
                             Tensor& delta_out, const Tensor& traced_in,
                             const std::vector<std::int32_t>& argmax) const = 0;

  /// Derivative of this layer's output with respect to one entry of one of
  /// its parameter tensors, evaluated at the traced input.
  virtual void seed_delta(const Tensor&, std::size_t, std::size_t,
                          Tensor&) const {
    throw input_error("layer has no parameters");
  }

  const std::vector<std::size_t>& param_indices() const { return params_; }

  Shape3 in_shape, out_shape;

 protected:
  std::vector<std::size_t> params_;
};

namespace {

Tensor make_out(const Tensor& in, Shape3 s) {
  return Tensor(in.n, s.h, s.w, s.c);
}

class ConvLayer : public Layer {
 public:
  explicit ConvLayer(const LayerSpec& spec) : spec_(spec) {}

  Shape3 infer_shape(Shape3 in) override {
    if (spec_.filter == 0 || spec_.stride == 0 || spec_.channels == 0) {
      throw config_error("conv layer needs positive filter/stride/channels");
    }
    if (in.h < spec_.filter || in.w < spec_.filter) {
      throw config_error("conv filter " + std::to_string(spec_.filter) +
                         " larger than input " + std::to_string(in.h) + "x" +
                         std::to_string(in.w));
    }
    if ((in.h - spec_.filter) % spec_.stride != 0 ||
        (in.w - spec_.filter) % spec_.stride != 0) {
      throw config_error("conv geometry does not tile the input exactly");
    }
    in_shape = in;
    out_shape = {(in.h - spec_.filter) / spec_.stride + 1,
                 (in.w - spec_.filter) / spec_.stride + 1, spec_.channels};
    return out_shape;
  }

  void init_params(ParamStore& store, ParamGroup group,
                   const std::string& prefix, Rng& rng) override {
    const std::size_t k = spec_.filter;
    const std::size_t ci = in_shape.c;
    const std::size_t co = spec_.channels;
    ParamTensor w;
    w.name = prefix + ".weight";
    w.group = group;
    w.shape = {k, k, ci, co};
    w.value.resize(k * k * ci * co);
    const double std = std::sqrt(1.0 / static_cast<double>(k * k * ci));
    for (double& x : w.value) x = std * rng.normal();
    params_.push_back(store.add(std::move(w)));

    ParamTensor b;
    b.name = prefix + ".bias";
    b.group = group;
    b.shape = {co};
    b.value.assign(co, 0.0);
    params_.push_back(store.add(std::move(b)));
  }

  void forward(const ParamStore& params, const Tensor& in, Tensor& out,
               std::vector<std::int32_t>*) const override {
    const auto& wv = params.tensor(params_[0]).value;
    const auto& bv = params.tensor(params_[1]).value;
    const std::size_t k = spec_.filter, s = spec_.stride;
    const std::size_t ci = in_shape.c, co = out_shape.c;
    const std::size_t oh = out_shape.h, ow = out_shape.w;
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double* o = &out.v[((n * oh + y) * ow + x) * co];
          for (std::size_t ch = 0; ch < co; ++ch) o[ch] = bv[ch];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* irow =
                &in.v[((n * in_shape.h + y * s + ky) * in_shape.w + x * s) * ci];
            const double* wrow = &wv[ky * k * ci * co];
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double* ip = irow + kx * ci;
              const double* wp = wrow + kx * ci * co;
              for (std::size_t cc = 0; cc < ci; ++cc) {
                const double a = ip[cc];
                const double* wr = wp + cc * co;
                for (std::size_t ch = 0; ch < co; ++ch) o[ch] += a * wr[ch];
              }
            }
          }
        }
      }
    }
  }

  void backward(ParamStore& params, const Tensor& in,
                const std::vector<std::int32_t>&, const Tensor& dout,
                Tensor* din) const override {
    const auto& wv = params.tensor(params_[0]).value;
    auto& dw = params.tensor(params_[0]).grad;
    auto& db = params.tensor(params_[1]).grad;
    const std::size_t k = spec_.filter, s = spec_.stride;
    const std::size_t ci = in_shape.c, co = out_shape.c;
    const std::size_t oh = out_shape.h, ow = out_shape.w;
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const double* g = &dout.v[((n * oh + y) * ow + x) * co];
          for (std::size_t ch = 0; ch < co; ++ch) db[ch] += g[ch];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::size_t iy = y * s + ky;
            const double* irow =
                &in.v[((n * in_shape.h + iy) * in_shape.w + x * s) * ci];
            double* drow =
                din ? &din->v[((n * in_shape.h + iy) * in_shape.w + x * s) * ci]
                    : nullptr;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double* ip = irow + kx * ci;
              double* dp = drow ? drow + kx * ci : nullptr;
              const std::size_t wbase = (ky * k + kx) * ci * co;
              for (std::size_t cc = 0; cc < ci; ++cc) {
                const double a = ip[cc];
                const double* wr = &wv[wbase + cc * co];
                double* dwr = &dw[wbase + cc * co];
                double acc = 0.0;
                for (std::size_t ch = 0; ch < co; ++ch) {
                  dwr[ch] += a * g[ch];
                  acc += wr[ch] * g[ch];
                }
                if (dp) dp[cc] += acc;
              }
            }
          }
        }
      }
    }
  }

  void forward_delta(const ParamStore& params, const Tensor& delta_in,
                     Tensor& delta_out, const Tensor&,
                     const std::vector<std::int32_t>&) const override {
    const auto& wv = params.tensor(params_[0]).value;
    const std::size_t k = spec_.filter, s = spec_.stride;
    const std::size_t ci = in_shape.c, co = out_shape.c;
    const std::size_t oh = out_shape.h, ow = out_shape.w;
    for (std::size_t n = 0; n < delta_in.n; ++n) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double* o = &delta_out.v[((n * oh + y) * ow + x) * co];
          std::fill(o, o + co, 0.0);
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* irow =
                &delta_in
                     .v[((n * in_shape.h + y * s + ky) * in_shape.w + x * s) *
                        ci];
            const double* wrow = &wv[ky * k * ci * co];
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double* ip = irow + kx * ci;
              const double* wp = wrow + kx * ci * co;
              for (std::size_t cc = 0; cc < ci; ++cc) {
                const double a = ip[cc];
                if (a == 0.0) continue;
                const double* wr = wp + cc * co;
                for (std::size_t ch = 0; ch < co; ++ch) o[ch] += a * wr[ch];
              }
            }
          }
        }
      }
    }
  }

  void seed_delta(const Tensor& traced_in, std::size_t tensor_idx,
                  std::size_t entry, Tensor& delta_out) const override {
    delta_out.zero();
    const std::size_t k = spec_.filter, s = spec_.stride;
    const std::size_t ci = in_shape.c, co = out_shape.c;
    const std::size_t oh = out_shape.h, ow = out_shape.w;
    if (tensor_idx == params_[0]) {
      const std::size_t ch = entry % co;
      const std::size_t cc = (entry / co) % ci;
      const std::size_t kx = (entry / (co * ci)) % k;
      const std::size_t ky = entry / (co * ci * k);
      for (std::size_t n = 0; n < traced_in.n; ++n) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t x = 0; x < ow; ++x) {
            delta_out.v[((n * oh + y) * ow + x) * co + ch] =
                traced_in.at(n, y * s + ky, x * s + kx, cc);
          }
        }
      }
    } else {
      const std::size_t ch = entry;
      for (std::size_t n = 0; n < traced_in.n; ++n)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x)
            delta_out.v[((n * oh + y) * ow + x) * co + ch] = 1.0;
    }
  }

 private:
  LayerSpec spec_;
};

class PoolLayer : public Layer {
 public:
  explicit PoolLayer(const LayerSpec& spec) : spec_(spec) {}

  Shape3 infer_shape(Shape3 in) override {
    if (spec_.filter == 0 || spec_.stride == 0) {
      throw config_error("pool layer needs positive window/stride");
    }
    if (in.h < spec_.filter || in.w < spec_.filter ||
        (in.h - spec_.filter) % spec_.stride != 0 ||
        (in.w - spec_.filter) % spec_.stride != 0) {
      throw config_error("pool geometry does not tile the input exactly");
    }
    in_shape = in;
    out_shape = {(in.h - spec_.filter) / spec_.stride + 1,
                 (in.w - spec_.filter) / spec_.stride + 1, in.c};
    return out_shape;
  }

  void forward(const ParamStore&, const Tensor& in, Tensor& out,
               std::vector<std::int32_t>* argmax) const override {
    const std::size_t p = spec_.filter, s = spec_.stride;
    argmax->assign(out.size(), 0);
    std::size_t o = 0;
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < out_shape.h; ++y) {
        for (std::size_t x = 0; x < out_shape.w; ++x) {
          for (std::size_t ch = 0; ch < in.c; ++ch, ++o) {
            double best = -1e300;
            std::size_t best_i = 0;
            for (std::size_t py = 0; py < p; ++py) {
              for (std::size_t px = 0; px < p; ++px) {
                const std::size_t idx =
                    ((n * in.h + y * s + py) * in.w + x * s + px) * in.c + ch;
                if (in.v[idx] > best) {
                  best = in.v[idx];
                  best_i = idx;
                }
              }
            }
            out.v[o] = best;
            (*argmax)[o] = static_cast<std::int32_t>(best_i);
          }
        }
      }
    }
  }

  void backward(ParamStore&, const Tensor&,
                const std::vector<std::int32_t>& argmax, const Tensor& dout,
                Tensor* din) const override {
    if (!din) return;
    for (std::size_t o = 0; o < dout.size(); ++o)
      din->v[argmax[o]] += dout.v[o];
  }

  void forward_delta(const ParamStore&, const Tensor& delta_in,
                     Tensor& delta_out, const Tensor&,
                     const std::vector<std::int32_t>& argmax) const override {
    for (std::size_t o = 0; o < delta_out.size(); ++o)
      delta_out.v[o] = delta_in.v[argmax[o]];
  }

 private:
  LayerSpec spec_;
};

class ReluLayer : public Layer {
 public:
  Shape3 infer_shape(Shape3 in) override {
    in_shape = in;
    out_shape = in;
    return in;
  }

  void forward(const ParamStore&, const Tensor& in, Tensor& out,
               std::vector<std::int32_t>*) const override {
    for (std::size_t i = 0; i < in.size(); ++i)
      out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
  }

  void backward(ParamStore&, const Tensor& in,
                const std::vector<std::int32_t>&, const Tensor& dout,
                Tensor* din) const override {
    if (!din) return;
    for (std::size_t i = 0; i < in.size(); ++i)
      din->v[i] += in.v[i] > 0.0 ? dout.v[i] : 0.0;
  }

  void forward_delta(const ParamStore&, const Tensor& delta_in,
                     Tensor& delta_out, const Tensor& traced_in,
                     const std::vector<std::int32_t>&) const override {
    for (std::size_t i = 0; i < delta_in.size(); ++i)
      delta_out.v[i] = traced_in.v[i] > 0.0 ? delta_in.v[i] : 0.0;
  }
};

class FlattenLayer : public Layer {
 public:
  Shape3 infer_shape(Shape3 in) override {
    in_shape = in;
    out_shape = {1, 1, in.count()};
    return out_shape;
  }

  void forward(const ParamStore&, const Tensor& in, Tensor& out,
               std::vector<std::int32_t>*) const override {
    out.v = in.v;
  }

  void backward(ParamStore&, const Tensor&, const std::vector<std::int32_t>&,
                const Tensor& dout, Tensor* din) const override {
    if (!din) return;
    for (std::size_t i = 0; i < dout.size(); ++i) din->v[i] += dout.v[i];
  }

  void forward_delta(const ParamStore&, const Tensor& delta_in,
                     Tensor& delta_out, const Tensor&,
                     const std::vector<std::int32_t>&) const override {
    delta_out.v = delta_in.v;
  }
};

class DenseLayer : public Layer {
 public:
  explicit DenseLayer(const LayerSpec& spec) : spec_(spec) {}

  Shape3 infer_shape(Shape3 in) override {
    if (spec_.units == 0) throw config_error("dense layer needs units > 0");
    if (in.h != 1 || in.w != 1) {
      throw config_error("dense layer expects flattened input, got " +
                         std::to_string(in.h) + "x" + std::to_string(in.w) +
                         "x" + std::to_string(in.c));
    }
    in_shape = in;
    out_shape = {1, 1, spec_.units};
    return out_shape;
  }

  void init_params(ParamStore& store, ParamGroup group,
                   const std::string& prefix, Rng& rng) override {
    const std::size_t d = in_shape.c, u = spec_.units;
    ParamTensor w;
    w.name = prefix + ".weight";
    w.group = group;
    w.shape = {d, u};
    w.value.resize(d * u);
    const double std = std::sqrt(1.0 / static_cast<double>(d));
    for (double& x : w.value) x = std * rng.normal();
    params_.push_back(store.add(std::move(w)));
    if (spec_.bias) {
      ParamTensor b;
      b.name = prefix + ".bias";
      b.group = group;
      b.shape = {u};
      b.value.assign(u, 0.0);
      params_.push_back(store.add(std::move(b)));
    }
  }

  void forward(const ParamStore& params, const Tensor& in, Tensor& out,
               std::vector<std::int32_t>*) const override {
    const auto& wv = params.tensor(params_[0]).value;
    const double* bv =
        spec_.bias ? params.tensor(params_[1]).value.data() : nullptr;
    const std::size_t d = in_shape.c, u = spec_.units;
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* ip = in.sample(n);
      double* o = out.sample(n);
      if (bv) {
        std::copy(bv, bv + u, o);
      } else {
        std::fill(o, o + u, 0.0);
      }
      for (std::size_t i = 0; i < d; ++i) {
        const double a = ip[i];
        const double* wr = &wv[i * u];
        for (std::size_t j = 0; j < u; ++j) o[j] += a * wr[j];
      }
    }
  }

  void backward(ParamStore& params, const Tensor& in,
                const std::vector<std::int32_t>&, const Tensor& dout,
                Tensor* din) const override {
    const auto& wv = params.tensor(params_[0]).value;
    auto& dw = params.tensor(params_[0]).grad;
    double* db = spec_.bias ? params.tensor(params_[1]).grad.data() : nullptr;
    const std::size_t d = in_shape.c, u = spec_.units;
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* ip = in.sample(n);
      const double* g = dout.sample(n);
      if (db) {
        for (std::size_t j = 0; j < u; ++j) db[j] += g[j];
      }
      double* dp = din ? din->sample(n) : nullptr;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = ip[i];
        const double* wr = &wv[i * u];
        double* dwr = &dw[i * u];
        double acc = 0.0;
        for (std::size_t j = 0; j < u; ++j) {
          dwr[j] += a * g[j];
          acc += wr[j] * g[j];
        }
        if (dp) dp[i] += acc;
      }
    }
  }

  void forward_delta(const ParamStore& params, const Tensor& delta_in,
                     Tensor& delta_out, const Tensor&,
                     const std::vector<std::int32_t>&) const override {
    const auto& wv = params.tensor(params_[0]).value;
    const std::size_t d = in_shape.c, u = spec_.units;
    for (std::size_t n = 0; n < delta_in.n; ++n) {
      const double* ip = delta_in.sample(n);
      double* o = delta_out.sample(n);
      std::fill(o, o + u, 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        const double a = ip[i];
        if (a == 0.0) continue;
        const double* wr = &wv[i * u];
        for (std::size_t j = 0; j < u; ++j) o[j] += a * wr[j];
      }
    }
  }

  void seed_delta(const Tensor& traced_in, std::size_t tensor_idx,
                  std::size_t entry, Tensor& delta_out) const override {
    delta_out.zero();
    const std::size_t u = spec_.units;
    if (tensor_idx == params_[0]) {
      const std::size_t j = entry % u;
      const std::size_t i = entry / u;
      for (std::size_t n = 0; n < traced_in.n; ++n)
        delta_out.sample(n)[j] = traced_in.sample(n)[i];
    } else {
      for (std::size_t n = 0; n < traced_in.n; ++n)
        delta_out.sample(n)[entry] = 1.0;
    }
  }

 private:
  LayerSpec spec_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::kConvolution:
      return std::make_unique<ConvLayer>(spec);
    case LayerKind::kMaxPool:
      return std::make_unique<PoolLayer>(spec);
    case LayerKind::kDense:
      return std::make_unique<DenseLayer>(spec);
    case LayerKind::kRelu:
      return std::make_unique<ReluLayer>();
    case LayerKind::kFlatten:
      return std::make_unique<FlattenLayer>();
  }
  throw config_error("unknown layer kind");
}

const char* kSegmentNames[5] = {"trunk", "trunk2", "head_aesthetic",
                                "head_semantic", "head_aux"};

std::string param_prefix(std::size_t seg, const LayerSpec& spec,
                         std::size_t ordinal) {
  const char* kind = spec.kind == LayerKind::kConvolution ? "conv" : "dense";
  return std::string(kSegmentNames[seg]) + "." + kind +
         std::to_string(ordinal);
}

}  // namespace

// ---------------------------------------------------------------------------
// LayerGraph
// ---------------------------------------------------------------------------

LayerGraph::LayerGraph() = default;
LayerGraph::LayerGraph(LayerGraph&&) noexcept = default;
LayerGraph& LayerGraph::operator=(LayerGraph&&) noexcept = default;
LayerGraph::~LayerGraph() = default;

std::pair<LayerGraph, ParamStore> build(const ArchitectureConfig& config,
                                        std::uint64_t seed) {
  if (config.classes < 2) throw config_error("need at least 2 aesthetic classes");
  if (config.attributes < 1) throw config_error("need at least 1 attribute");

  LayerGraph g;
  g.config_ = config;
  g.segments_.resize(5);

  std::vector<LayerSpec> trunk1 = config.trunk;
  std::vector<LayerSpec> trunk2;
  if (config.theta1_layers > 0) {
    if (config.theta1_layers >= config.trunk.size()) {
      throw config_error("theta1_layers must split the trunk properly");
    }
    trunk1.assign(config.trunk.begin(),
                  config.trunk.begin() + config.theta1_layers);
    trunk2.assign(config.trunk.begin() + config.theta1_layers,
                  config.trunk.end());
  }
  if (config.variant == Variant::kEnhanced && config.aux_head.empty()) {
    throw config_error("enhanced variant requires an auxiliary head");
  }
  if (config.variant != Variant::kEnhanced && !config.aux_head.empty()) {
    throw config_error("auxiliary head is only valid for the enhanced variant");
  }

  const std::vector<LayerSpec>* stacks[5] = {
      &trunk1, &trunk2, &config.aesthetic_head, &config.semantic_head,
      &config.aux_head};

  ParamStore store;
  Shape3 shapes[5];
  shapes[kSegTrunk1] = {config.input_h, config.input_w, config.input_c};

  for (std::size_t seg = 0; seg < 5; ++seg) {
    Shape3 in;
    switch (seg) {
      case kSegTrunk1:
        in = shapes[kSegTrunk1];
        break;
      case kSegTrunk2:
        in = g.segments_[kSegTrunk1].out_shape;
        break;
      case kSegAesthetic:
      case kSegSemantic:
        in = g.segments_[kSegTrunk2].out_shape;
        break;
      case kSegAux:
        in = g.segments_[kSegTrunk1].out_shape;
        break;
    }
    LayerGraph::Segment& s = g.segments_[seg];
    s.in_shape = in;
    Rng rng(derive_seed(seed, std::string("init/") + kSegmentNames[seg]));
    std::size_t conv_ord = 0, dense_ord = 0;
    for (std::size_t li = 0; li < stacks[seg]->size(); ++li) {
      const LayerSpec& spec = (*stacks[seg])[li];
      auto layer = make_layer(spec);
      try {
        in = layer->infer_shape(in);
      } catch (const config_error& e) {
        throw config_error(std::string(kSegmentNames[seg]) + " layer " +
                           std::to_string(li) + ": " + e.what());
      }
      std::size_t ordinal = 0;
      if (spec.kind == LayerKind::kConvolution) ordinal = ++conv_ord;
      if (spec.kind == LayerKind::kDense) ordinal = ++dense_ord;
      ParamGroup group = seg == kSegAesthetic  ? ParamGroup::kHeadAesthetic
                         : seg == kSegSemantic ? ParamGroup::kHeadSemantic
                         : seg == kSegAux      ? ParamGroup::kHeadAux
                                               : ParamGroup::kTrunk;
      const std::size_t first_param = store.count();
      layer->init_params(store, group, param_prefix(seg, spec, ordinal), rng);
      for (std::size_t pi = first_param; pi < store.count(); ++pi) {
        g.param_owner_.push_back({seg, li});
      }
      s.layers.push_back(std::move(layer));
    }
    s.out_shape = in;
  }

  // Final head layers must be bias-free dense stacks of matching width so
  // the task matrix W = [W_a, W_s] is well formed.
  auto final_dense_check = [&](std::size_t seg, std::size_t want_units) {
    const auto& stack = *stacks[seg];
    if (stack.empty() || stack.back().kind != LayerKind::kDense ||
        stack.back().units != want_units) {
      throw config_error(std::string(kSegmentNames[seg]) +
                         " must end in a dense layer with " +
                         std::to_string(want_units) + " outputs");
    }
  };
  final_dense_check(kSegAesthetic, config.classes);
  final_dense_check(kSegSemantic, config.attributes);
  if (!config.aux_head.empty()) final_dense_check(kSegAux, config.classes);

  const Layer* aes_final = g.segments_[kSegAesthetic].layers.back().get();
  const Layer* sem_final = g.segments_[kSegSemantic].layers.back().get();
  if (aes_final->in_shape.c != sem_final->in_shape.c) {
    throw config_error(
        "task heads end with different input widths (" +
        std::to_string(aes_final->in_shape.c) + " vs " +
        std::to_string(sem_final->in_shape.c) +
        "); the task matrix W = [W_a, W_s] requires a common width");
  }
  g.shared_dim_ = aes_final->in_shape.c;

  std::optional<std::size_t> aux_idx;
  if (!config.aux_head.empty()) {
    aux_idx = g.segments_[kSegAux].layers.back()->param_indices()[0];
  }
  store.set_task_heads(aes_final->param_indices()[0],
                       sem_final->param_indices()[0], aux_idx);

  return {std::move(g), std::move(store)};
}

void LayerGraph::forward_segment(std::size_t seg, const ParamStore& params,
                                 const Tensor& input,
                                 ForwardTrace::SegmentTrace& t) const {
  const Segment& s = segments_[seg];
  t.acts.resize(s.layers.size() + 1);
  t.pool_argmax.assign(s.layers.size(), {});
  t.acts[0] = input;
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    const Layer& layer = *s.layers[li];
    Tensor& out = t.acts[li + 1];
    if (out.n != input.n || out.h != layer.out_shape.h ||
        out.w != layer.out_shape.w || out.c != layer.out_shape.c) {
      out = make_out(input, layer.out_shape);
    }
    layer.forward(params, t.acts[li], out, &t.pool_argmax[li]);
  }
}

void LayerGraph::forward(const ParamStore& params, const Tensor& batch,
                         ForwardTrace& trace) const {
  const Shape3 want = segments_[kSegTrunk1].in_shape;
  if (batch.h != want.h || batch.w != want.w || batch.c != want.c) {
    throw input_error("batch shape " + std::to_string(batch.h) + "x" +
                      std::to_string(batch.w) + "x" + std::to_string(batch.c) +
                      " does not match the configured input " +
                      std::to_string(want.h) + "x" + std::to_string(want.w) +
                      "x" + std::to_string(want.c));
  }
  trace.batch = batch.n;
  trace.segments.resize(5);
  forward_segment(kSegTrunk1, params, batch, trace.segments[kSegTrunk1]);
  const Tensor& t1 = trace.segments[kSegTrunk1].acts.back();
  forward_segment(kSegTrunk2, params, t1, trace.segments[kSegTrunk2]);
  const Tensor& t2 = trace.segments[kSegTrunk2].acts.back();
  forward_segment(kSegAesthetic, params, t2, trace.segments[kSegAesthetic]);
  forward_segment(kSegSemantic, params, t2, trace.segments[kSegSemantic]);
  if (!segments_[kSegAux].layers.empty()) {
    forward_segment(kSegAux, params, t1, trace.segments[kSegAux]);
  } else {
    trace.segments[kSegAux].acts.clear();
  }
}

namespace {

/// Backpropagates one segment; returns the gradient at the segment input
/// accumulated into `din_accum` (if non-null).
void backward_segment(const std::vector<std::unique_ptr<Layer>>& layers,
                      ParamStore& params,
                      const ForwardTrace::SegmentTrace& t, const Tensor& dout,
                      Tensor* din_accum) {
  if (layers.empty()) {
    if (din_accum) {
      for (std::size_t i = 0; i < dout.size(); ++i)
        din_accum->v[i] += dout.v[i];
    }
    return;
  }
  Tensor cur = dout;
  Tensor prev;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Tensor& in = t.acts[li];
    const bool need_din = li > 0 || din_accum != nullptr;
    Tensor* din = nullptr;
    if (need_din) {
      if (li == 0 && din_accum) {
        din = din_accum;  // accumulate into the caller's buffer
      } else {
        prev = Tensor(in.n, in.h, in.w, in.c);
        din = &prev;
      }
    }
    layers[li]->backward(params, in, t.pool_argmax[li], cur, din);
    if (li > 0) cur = std::move(prev);
  }
}

}  // namespace

void LayerGraph::backward(ParamStore& params, const ForwardTrace& trace,
                          const Tensor& d_aesthetic, const Tensor& d_semantic,
                          const Tensor* d_aux) const {
  if (trace.segments.size() != 5 || trace.segments[kSegTrunk1].acts.empty()) {
    throw input_error("backward called without a matching forward trace");
  }
  params.zero_grads();

  const Tensor& t2 = trace.segments[kSegTrunk2].acts.back();
  Tensor d_t2(t2.n, t2.h, t2.w, t2.c);
  backward_segment(segments_[kSegAesthetic].layers, params,
                   trace.segments[kSegAesthetic], d_aesthetic, &d_t2);
  backward_segment(segments_[kSegSemantic].layers, params,
                   trace.segments[kSegSemantic], d_semantic, &d_t2);

  const Tensor& t1 = trace.segments[kSegTrunk1].acts.back();
  Tensor d_t1(t1.n, t1.h, t1.w, t1.c);
  backward_segment(segments_[kSegTrunk2].layers, params,
                   trace.segments[kSegTrunk2], d_t2, &d_t1);
  if (d_aux != nullptr && !segments_[kSegAux].layers.empty()) {
    backward_segment(segments_[kSegAux].layers, params,
                     trace.segments[kSegAux], *d_aux, &d_t1);
  }
  backward_segment(segments_[kSegTrunk1].layers, params,
                   trace.segments[kSegTrunk1], d_t1, nullptr);
}

std::unique_ptr<LayerGraph::ReplayScratch> LayerGraph::make_replay_scratch()
    const {
  auto s = std::make_unique<ReplayScratch>();
  s->deltas.resize(5);
  return s;
}

namespace {

/// Pushes a delta through segment layers [from, end); `bufs` holds one
/// tensor per layer boundary and is resized to match the trace shapes.
const Tensor* push_delta(const std::vector<std::unique_ptr<Layer>>& layers,
                         const ParamStore& params,
                         const ForwardTrace::SegmentTrace& t,
                         std::vector<Tensor>& bufs, const Tensor* delta,
                         std::size_t from) {
  bufs.resize(layers.size() + 1);
  for (std::size_t li = from; li < layers.size(); ++li) {
    const Tensor& ref = t.acts[li + 1];
    Tensor& out = bufs[li + 1];
    if (!out.same_shape(ref)) out = Tensor(ref.n, ref.h, ref.w, ref.c);
    layers[li]->forward_delta(params, *delta, out, t.acts[li],
                              t.pool_argmax[li]);
    delta = &out;
  }
  return delta;
}

}  // namespace

void LayerGraph::logit_sensitivity(const ParamStore& params,
                                   const ForwardTrace& trace,
                                   std::size_t tensor_idx, std::size_t entry,
                                   ReplayScratch& scratch, Tensor& d_aesthetic,
                                   Tensor& d_semantic, Tensor* d_aux) const {
  const auto [seg, li] = param_owner_.at(tensor_idx);
  const Segment& owner = segments_[seg];
  const ForwardTrace::SegmentTrace& ot = trace.segments[seg];

  auto& bufs = scratch.deltas[seg];
  bufs.resize(owner.layers.size() + 1);
  const Tensor& out_ref = ot.acts[li + 1];
  Tensor& seeded = bufs[li + 1];
  if (!seeded.same_shape(out_ref))
    seeded = Tensor(out_ref.n, out_ref.h, out_ref.w, out_ref.c);
  owner.layers[li]->seed_delta(ot.acts[li], tensor_idx, entry, seeded);

  const Tensor* delta =
      push_delta(owner.layers, params, ot, bufs, &seeded, li + 1);

  const Tensor& la = trace.aesthetic_logits();
  const Tensor& ls = trace.semantic_logits();
  if (!d_aesthetic.same_shape(la)) d_aesthetic = Tensor(la.n, 1, 1, la.c);
  if (!d_semantic.same_shape(ls)) d_semantic = Tensor(ls.n, 1, 1, ls.c);
  d_aesthetic.zero();
  d_semantic.zero();
  if (d_aux) {
    if (trace.has_aux()) {
      const Tensor& lx = trace.aux_logits();
      if (!d_aux->same_shape(lx)) *d_aux = Tensor(lx.n, 1, 1, lx.c);
    }
    d_aux->zero();
  }

  auto run_heads_from_trunk2_out = [&](const Tensor* d) {
    const Tensor* da =
        push_delta(segments_[kSegAesthetic].layers, params,
                   trace.segments[kSegAesthetic],
                   scratch.deltas[kSegAesthetic], d, 0);
    d_aesthetic.v = da->v;
    const Tensor* ds =
        push_delta(segments_[kSegSemantic].layers, params,
                   trace.segments[kSegSemantic], scratch.deltas[kSegSemantic],
                   d, 0);
    d_semantic.v = ds->v;
  };

  switch (seg) {
    case kSegTrunk1: {
      if (d_aux && !segments_[kSegAux].layers.empty()) {
        const Tensor* dx =
            push_delta(segments_[kSegAux].layers, params,
                       trace.segments[kSegAux], scratch.deltas[kSegAux], delta,
                       0);
        d_aux->v = dx->v;
      }
      const Tensor* d2 =
          push_delta(segments_[kSegTrunk2].layers, params,
                     trace.segments[kSegTrunk2], scratch.deltas[kSegTrunk2],
                     delta, 0);
      run_heads_from_trunk2_out(d2);
      break;
    }
    case kSegTrunk2:
      run_heads_from_trunk2_out(delta);
      break;
    case kSegAesthetic:
      d_aesthetic.v = delta->v;
      break;
    case kSegSemantic:
      d_semantic.v = delta->v;
      break;
    case kSegAux:
      if (d_aux) d_aux->v = delta->v;
      break;
  }
}

}  // namespace mtaesth
