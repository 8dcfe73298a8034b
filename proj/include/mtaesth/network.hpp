#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtaesth/linalg.hpp"
#include "mtaesth/tensor.hpp"

namespace mtaesth {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

enum class LayerKind { kConvolution, kMaxPool, kDense, kRelu, kFlatten };

/// One layer of a stack. Convolutions are "valid" (no padding).
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t filter = 0;    ///< conv kernel edge / pool window
  std::size_t stride = 1;    ///< conv or pool stride
  std::size_t channels = 0;  ///< conv output channels
  std::size_t units = 0;     ///< dense output width
  bool bias = true;          ///< dense only; task heads drop the bias

  static LayerSpec conv(std::size_t filter, std::size_t channels,
                        std::size_t stride = 1);
  static LayerSpec pool(std::size_t window = 2, std::size_t stride = 0);
  static LayerSpec dense(std::size_t units, bool bias = true);
  static LayerSpec relu();
  static LayerSpec flatten();

  std::string to_string() const;
  static LayerSpec from_string(const std::string& s);
};

enum class Variant { kMtcnn1, kMtcnn2, kMtcnn3, kEnhanced };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// Layer stacks for the shared trunk and the task heads. For the enhanced
/// variant the trunk is split: the first `theta1_layers` entries form the
/// early segment the auxiliary aesthetic head taps into.
struct ArchitectureConfig {
  Variant variant = Variant::kMtcnn1;
  std::size_t input_h = 32, input_w = 32, input_c = 3;
  std::size_t classes = 2;     ///< C
  std::size_t attributes = 8;  ///< M
  std::vector<LayerSpec> trunk;
  std::size_t theta1_layers = 0;  ///< enhanced only; 0 = no split
  std::vector<LayerSpec> aesthetic_head;
  std::vector<LayerSpec> semantic_head;
  std::vector<LayerSpec> aux_head;  ///< enhanced only

  std::string serialize() const;
  static ArchitectureConfig deserialize(const std::string& text);
};

/// Stock layer stacks for the four explored variants, scaled by the conv
/// channel counts, kernel sizes and dense widths from the run config.
struct ArchitectureScale {
  std::vector<std::size_t> conv_channels = {16, 32, 32, 32};
  std::vector<std::size_t> conv_filters = {5, 5, 3, 3};
  std::vector<std::size_t> dense_units = {128, 64};
};

ArchitectureConfig default_architecture(Variant variant, std::size_t input_h,
                                        std::size_t input_w,
                                        std::size_t input_c,
                                        std::size_t classes,
                                        std::size_t attributes,
                                        const ArchitectureScale& scale = {});

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class ParamGroup { kTrunk, kHeadAesthetic, kHeadSemantic, kHeadAux };

struct ParamTensor {
  std::string name;
  ParamGroup group = ParamGroup::kTrunk;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;

  std::size_t size() const { return value.size(); }
};

/// Named parameter tensors plus matching gradient buffers, partitioned into
/// trunk and head groups.
class ParamStore {
 public:
  std::size_t add(ParamTensor t);
  std::size_t count() const { return tensors_.size(); }
  ParamTensor& tensor(std::size_t i) { return tensors_[i]; }
  const ParamTensor& tensor(std::size_t i) const { return tensors_[i]; }
  const ParamTensor* find(const std::string& name) const;
  ParamTensor* find(const std::string& name);

  std::size_t total_params() const;
  void zero_grads();

  /// The final-layer task matrix W = [W_a, W_s] (optionally [W_a', W_a, W_s]),
  /// shape d x (C+M). Column j is one subtask's parameter vector.
  Matrix task_matrix(bool include_aux = false) const;
  /// Scatter-adds a gradient in task-matrix layout back onto the head
  /// parameter gradients.
  void add_task_matrix_grad(const Matrix& g, bool include_aux = false);

  void set_task_heads(std::size_t aesthetic_idx, std::size_t semantic_idx,
                      std::optional<std::size_t> aux_idx);
  std::size_t head_aesthetic_index() const { return head_aesthetic_; }
  std::size_t head_semantic_index() const { return head_semantic_; }
  std::optional<std::size_t> head_aux_index() const { return head_aux_; }

  std::vector<ParamTensor>& tensors() { return tensors_; }
  const std::vector<ParamTensor>& tensors() const { return tensors_; }

 private:
  std::vector<ParamTensor> tensors_;
  std::size_t head_aesthetic_ = 0;
  std::size_t head_semantic_ = 0;
  std::optional<std::size_t> head_aux_;
};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

struct Shape3 {
  std::size_t h = 0, w = 0, c = 0;
  std::size_t count() const { return h * w * c; }
};

class Layer;

/// Activations retained by a forward pass: inputs of every layer per
/// segment plus pooling argmax indices, enough to run the exact backward
/// pass (and to replay perturbed forwards with frozen relu/pool decisions).
struct ForwardTrace {
  struct SegmentTrace {
    std::vector<Tensor> acts;               ///< acts[0]=input, acts[i+1]=layer i output
    std::vector<std::vector<std::int32_t>> pool_argmax;  ///< per layer, empty if unused
  };
  std::vector<SegmentTrace> segments;  ///< trunk1, trunk2, aesthetic, semantic, aux
  std::size_t batch = 0;

  const Tensor& aesthetic_logits() const { return segments[2].acts.back(); }
  const Tensor& semantic_logits() const { return segments[3].acts.back(); }
  const Tensor& aux_logits() const { return segments[4].acts.back(); }
  bool has_aux() const { return segments.size() > 4 && !segments[4].acts.empty(); }
};

/// Segment indices inside a LayerGraph / ForwardTrace.
inline constexpr std::size_t kSegTrunk1 = 0;
inline constexpr std::size_t kSegTrunk2 = 1;
inline constexpr std::size_t kSegAesthetic = 2;
inline constexpr std::size_t kSegSemantic = 3;
inline constexpr std::size_t kSegAux = 4;

/// The layer graph: trunk1 -> trunk2 -> {aesthetic, semantic} heads, with an
/// optional auxiliary aesthetic head reading the trunk1 output.
class LayerGraph {
 public:
  LayerGraph();
  LayerGraph(const LayerGraph&) = delete;
  LayerGraph& operator=(const LayerGraph&) = delete;
  LayerGraph(LayerGraph&&) noexcept;
  LayerGraph& operator=(LayerGraph&&) noexcept;
  ~LayerGraph();

  const ArchitectureConfig& config() const { return config_; }
  std::size_t shared_dim() const { return shared_dim_; }

  void forward(const ParamStore& params, const Tensor& batch,
               ForwardTrace& trace) const;

  /// Accumulates parameter gradients for the supplied logit gradients.
  /// All gradient buffers are zeroed first; groups not reachable from a
  /// nonzero logit gradient end up exactly zero.
  void backward(ParamStore& params, const ForwardTrace& trace,
                const Tensor& d_aesthetic, const Tensor& d_semantic,
                const Tensor* d_aux = nullptr) const;

  /// Directional derivative of every logit with respect to one parameter
  /// entry, along the graph with relu masks and pool argmax choices frozen
  /// at their traced values (the piecewise-linear branch the analytic
  /// gradient lives on). Downstream of the owning layer the frozen graph is
  /// linear, so perturbed logits are exactly logits ± eps * sensitivity.
  /// Used by the finite-difference harness; `scratch` is reusable across
  /// calls and owned by one thread.
  struct ReplayScratch {
    std::vector<std::vector<Tensor>> deltas;  ///< [segment][layer boundary]
  };
  std::unique_ptr<ReplayScratch> make_replay_scratch() const;
  void logit_sensitivity(const ParamStore& params, const ForwardTrace& trace,
                         std::size_t tensor_idx, std::size_t entry,
                         ReplayScratch& scratch, Tensor& d_aesthetic,
                         Tensor& d_semantic, Tensor* d_aux) const;

  friend std::pair<LayerGraph, ParamStore> build(const ArchitectureConfig&,
                                                 std::uint64_t);

 private:
  struct Segment {
    std::vector<std::unique_ptr<Layer>> layers;
    Shape3 in_shape, out_shape;
  };

  void forward_segment(std::size_t seg, const ParamStore& params,
                       const Tensor& input, ForwardTrace::SegmentTrace& t) const;

  ArchitectureConfig config_;
  std::vector<Segment> segments_;
  std::size_t shared_dim_ = 0;
  // tensor index -> (segment, layer) owner, for replay
  std::vector<std::pair<std::size_t, std::size_t>> param_owner_;
};

/// Builds the graph and draws initial weights: zero-mean Gaussians scaled
/// by sqrt(1/fan_in), biases zero; deterministic in the seed.
std::pair<LayerGraph, ParamStore> build(const ArchitectureConfig& config,
                                        std::uint64_t seed);

}  // namespace mtaesth
