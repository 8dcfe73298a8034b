#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mtaesth/data.hpp"
#include "mtaesth/network.hpp"
#include "mtaesth/objectives.hpp"

namespace mtaesth {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  ArchitectureConfig arch;
  BalancePolicy policy;
  bool relationship = false;
  bool relationship_include_aux = false;
  double gamma_theta = 1e-4;
  double gamma_w = 1e-4;
  double gamma_omega = 1e-3;
  double learning_rate = 0.02;
  double lr_decay = 0.1;
  std::size_t lr_decay_epochs = 8;
  double momentum = 0.9;
  std::size_t batch = 32;
  std::size_t epochs = 10;
  std::size_t omega_interval_epochs = 1;
  std::uint64_t seed = 1;
  bool mask_semantic = false;  ///< finetune mode: lambda forced to 0

  void validate() const;
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EpochRow {
  LossBreakdown losses;  ///< means over the epoch's batches
  double accuracy = 0.0;
  std::vector<double> attr_ap;
  double lambda = 0.0;
};

struct OmegaUpdateEvent {
  std::size_t epoch = 0;
  double objective_before = 0.0;  ///< tr(W omega_old^{-1} Wᵀ)
  double objective_after = 0.0;   ///< tr(W omega_new^{-1} Wᵀ), same W
};

struct TrainReport {
  std::vector<EpochRow> epochs;
  std::vector<OmegaUpdateEvent> omega_events;
  std::optional<SymMatrix> final_omega;
  std::optional<SymMatrix> final_correlation;
  std::array<double, 3> channel_means{0.0, 0.0, 0.0};

  std::string report_csv() const;
  /// Square CSV with a header row of subtask names.
  static std::string omega_csv(const SymMatrix& m, std::size_t classes,
                               const std::vector<std::string>& attr_names);
};

std::vector<std::string> subtask_names(std::size_t classes,
                                       const std::vector<std::string>& attrs);

struct TrainResult {
  LayerGraph graph;
  ParamStore params;
  TrainReport report;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Momentum SGD: v <- momentum * v + g, p <- p - lr * v. With momentum 0
/// one step is exactly the vanilla gradient step.
class SgdOptimizer {
 public:
  SgdOptimizer(const ParamStore& params, double momentum);
  void step(ParamStore& params, double lr);

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Closed-form covariance update: psd_sqrt(WᵀW + ridge I) scaled to unit
/// trace. ridge < 0 selects the default 1e-8 * trace(WᵀW).
TaskCovariance update_omega(const Matrix& w, double ridge = -1.0);

enum class EarlyStopDecision { kContinue, kFreeze };

/// Freezes the semantic task once its loss improvement over the last
/// `patience` epochs drops below 1e-3 relative.
EarlyStopDecision early_stop_monitor(const std::vector<double>& semantic_loss,
                                     std::size_t patience);

/// SGD with alternating closed-form covariance re-estimation.
TrainResult train(const TrainConfig& config, const Dataset& data,
                  const std::vector<LabeledIndex>& train_records);

/// Continues from a checkpoint (architectures must match); with
/// config.mask_semantic the semantic loss weight is forced to zero.
TrainResult finetune(const std::string& checkpoint_path,
                     const TrainConfig& config, const Dataset& data,
                     const std::vector<LabeledIndex>& train_records);

// ---------------------------------------------------------------------------
// Gradient verification harness
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences (eps = 1e-4) of the full objective against the
/// analytic gradient, for every parameter. Relu masks and pool argmax
/// choices are frozen at the traced values so the check runs on the smooth
/// branch the analytic gradient differentiates; downstream of the perturbed
/// layer that branch is linear, which the harness exploits by propagating
/// per-parameter logit sensitivities instead of re-running full forwards.
/// Parameters are left bit-identical.
GradCheckReport gradient_check(const ArchitectureConfig& arch,
                               const LossSettings& settings,
                               const Tensor& batch, const BatchLabels& labels,
                               std::uint64_t seed, std::size_t threads = 0);

/// Same comparison, against caller-supplied analytic gradients (tests use
/// this to prove the harness flags corrupted gradients).
GradCheckReport gradient_check_against(
    const LayerGraph& graph, const ParamStore& params,
    const std::vector<std::vector<double>>& analytic, const Tensor& batch,
    const BatchLabels& labels, const TaskCovariance* omega,
    const LossSettings& settings, std::size_t threads = 0);

}  // namespace mtaesth
