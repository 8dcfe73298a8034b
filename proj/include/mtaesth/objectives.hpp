#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtaesth/linalg.hpp"
#include "mtaesth/network.hpp"
#include "mtaesth/tensor.hpp"

namespace mtaesth {

// ---------------------------------------------------------------------------
// Task covariance
// ---------------------------------------------------------------------------

/// Unit-trace PSD covariance over the C+M subtasks, with the ridge used
/// whenever its inverse is needed. The inverse is computed once up front so
/// the object is immutable and shareable.
struct TaskCovariance {
  SymMatrix omega;
  SymMatrix omega_inverse;
  double ridge = 0.0;

  static TaskCovariance from_omega(SymMatrix omega, double ridge);
  /// Uninformative initial covariance I/(C+M).
  static TaskCovariance uniform(std::size_t subtasks);
};

// ---------------------------------------------------------------------------
// Balance policy
// ---------------------------------------------------------------------------

enum class BalanceMode {
  kFixedLambda,  ///< fixed weight, default 1/M (2/M for the enhanced variant)
  kEqual,        ///< lambda = 1
  kNone,         ///< lambda = 0 (single aesthetic task)
  kEarlyStop,    ///< lambda = 1 until the semantic loss plateaus, then 0
};

struct BalancePolicy {
  BalanceMode mode = BalanceMode::kFixedLambda;
  double lambda = 0.0;  ///< resolved weight (pre-freeze value for early stop)
  double mu = 0.0;      ///< center of the (lambda - mu)^2 prior
  std::size_t patience = 3;

  static BalancePolicy fixed(double lambda, double mu);
  /// The balance strategy: lambda = 1/M, or 2/M when the variant adds the
  /// auxiliary aesthetic supervision.
  static BalancePolicy strategy(std::size_t attributes, Variant variant);
  static BalancePolicy equal(std::size_t attributes);
  static BalancePolicy none(std::size_t attributes);
  static BalancePolicy early_stop(std::size_t attributes,
                                  std::size_t patience);
};

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct ScalarLoss {
  double loss = 0.0;
  std::vector<double> grad;  ///< w.r.t. the logits
};

/// Softmax cross entropy with max-subtraction. grad = softmax - onehot.
ScalarLoss softmax_ce(std::span<const double> logits, std::size_t label);

/// Multi-label sigmoid cross entropy, summed over attributes, in the
/// log-sum-exp stable form. grad_m = sigmoid(l_m) - z_m.
ScalarLoss semantic_bce(std::span<const double> logits,
                        std::span<const std::uint8_t> z);

struct L2Terms {
  double reg_theta = 0.0;  ///< sum of squares over the trunk group(s)
  double reg_w = 0.0;      ///< sum of squares over all head groups
};

L2Terms l2_terms(const ParamStore& params);
/// Adds gamma * 2 * param to each gradient, per group.
void add_l2_gradients(ParamStore& params, double gamma_theta, double gamma_w);

struct RelationshipTerm {
  double value = 0.0;  ///< tr(W omega^{-1} Wᵀ)
  Matrix grad;         ///< 2 W omega^{-1}
};

RelationshipTerm relationship_term(const Matrix& w, const TaskCovariance& cov);

inline double lambda_prior(double lambda, double mu) {
  return (lambda - mu) * (lambda - mu);
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double aesthetic_ce = 0.0;
  double semantic_bce = 0.0;
  double aux_aesthetic_ce = 0.0;
  double reg_theta = 0.0;
  double reg_w = 0.0;
  double reg_lambda = 0.0;
  double relationship = 0.0;
  double total = 0.0;

  static std::string csv_header();
  std::string csv_row() const;
};

struct LossSettings {
  double lambda = 0.0;
  double mu = 0.0;
  double gamma_theta = 1e-4;
  double gamma_w = 1e-4;
  double gamma_omega = 1e-3;
  bool relationship = false;
  bool include_aux_in_relationship = false;
};

struct BatchLabels {
  std::vector<std::size_t> y;        ///< aesthetic class per sample
  std::vector<std::uint8_t> z;       ///< row-major batch x M, entries in {0,1}
  std::size_t attributes = 0;

  std::span<const std::uint8_t> sample_z(std::size_t n) const {
    return {z.data() + n * attributes, attributes};
  }
};

struct TotalLoss {
  LossBreakdown breakdown;
  Tensor d_aesthetic;  ///< d total / d aesthetic logits (batch mean applied)
  Tensor d_semantic;
  Tensor d_aux;        ///< zero-sized unless the trace has an aux head
};

/// Evaluates every term of the joint objective on a forward trace. Batch
/// losses are means over the samples; the regularizers and the relationship
/// penalty enter once. Parameter-space gradients (weight decay, 2 W
/// omega^{-1}) are NOT applied here; callers combine them with the logits
/// backward pass.
TotalLoss total_loss(const ForwardTrace& trace, const BatchLabels& labels,
                     const ParamStore& params, const TaskCovariance* omega,
                     const LossSettings& cfg);

/// The scalar value of total_loss only, for harnesses that recompute logits.
double total_loss_value(const Tensor& aesthetic_logits,
                        const Tensor& semantic_logits, const Tensor* aux_logits,
                        const BatchLabels& labels, const L2Terms& l2,
                        double relationship_value, const LossSettings& cfg);

}  // namespace mtaesth
