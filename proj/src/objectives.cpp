#include "mtaesth/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mtaesth/errors.hpp"

namespace mtaesth {

TaskCovariance TaskCovariance::from_omega(SymMatrix omega, double ridge) {
  TaskCovariance c;
  c.omega_inverse = sym_inverse(omega, ridge);
  c.omega = std::move(omega);
  c.ridge = ridge;
  return c;
}

TaskCovariance TaskCovariance::uniform(std::size_t subtasks) {
  SymMatrix omega(subtasks);
  const double d = 1.0 / static_cast<double>(subtasks);
  for (std::size_t i = 0; i < subtasks; ++i) omega.at(i, i) = d;
  return from_omega(std::move(omega), kDefaultJitter);
}

BalancePolicy BalancePolicy::fixed(double lambda, double mu) {
  if (lambda < 0.0) throw config_error("lambda must be nonnegative");
  BalancePolicy p;
  p.mode = BalanceMode::kFixedLambda;
  p.lambda = lambda;
  p.mu = mu;
  return p;
}

BalancePolicy BalancePolicy::strategy(std::size_t attributes, Variant variant) {
  const double m = static_cast<double>(attributes);
  const double lam = variant == Variant::kEnhanced ? 2.0 / m : 1.0 / m;
  return fixed(lam, 1.0 / m);
}

BalancePolicy BalancePolicy::equal(std::size_t attributes) {
  BalancePolicy p;
  p.mode = BalanceMode::kEqual;
  p.lambda = 1.0;
  p.mu = 1.0 / static_cast<double>(attributes);
  return p;
}

BalancePolicy BalancePolicy::none(std::size_t attributes) {
  BalancePolicy p;
  p.mode = BalanceMode::kNone;
  p.lambda = 0.0;
  p.mu = 1.0 / static_cast<double>(attributes);
  return p;
}

BalancePolicy BalancePolicy::early_stop(std::size_t attributes,
                                        std::size_t patience) {
  BalancePolicy p;
  p.mode = BalanceMode::kEarlyStop;
  p.lambda = 1.0;
  p.mu = 1.0 / static_cast<double>(attributes);
  p.patience = patience;
  return p;
}

ScalarLoss softmax_ce(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw input_error("label " + std::to_string(label) +
                      " out of range for " + std::to_string(logits.size()) +
                      " classes");
  }
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  const double log_sum = std::log(sum);

  ScalarLoss out;
  out.loss = -(logits[label] - mx - log_sum);
  out.grad.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    out.grad[c] = std::exp(logits[c] - mx) / sum;
  }
  out.grad[label] -= 1.0;
  return out;
}

ScalarLoss semantic_bce(std::span<const double> logits,
                        std::span<const std::uint8_t> z) {
  if (z.size() != logits.size()) {
    throw input_error("semantic label length " + std::to_string(z.size()) +
                      " does not match " + std::to_string(logits.size()) +
                      " logits");
  }
  ScalarLoss out;
  out.grad.resize(logits.size());
  for (std::size_t m = 0; m < logits.size(); ++m) {
    if (z[m] > 1) {
      throw input_error("semantic label " + std::to_string(m) +
                        " is not binary");
    }
    const double l = logits[m];
    const double zm = static_cast<double>(z[m]);
    // -[z log s + (1-z) log(1-s)] = max(l,0) - z*l + log(1+exp(-|l|))
    out.loss += std::max(l, 0.0) - zm * l + std::log1p(std::exp(-std::abs(l)));
    out.grad[m] = 1.0 / (1.0 + std::exp(-l)) - zm;
  }
  return out;
}

L2Terms l2_terms(const ParamStore& params) {
  L2Terms t;
  for (const auto& p : params.tensors()) {
    double s = 0.0;
    for (double x : p.value) s += x * x;
    if (p.group == ParamGroup::kTrunk) {
      t.reg_theta += s;
    } else {
      t.reg_w += s;
    }
  }
  return t;
}

void add_l2_gradients(ParamStore& params, double gamma_theta, double gamma_w) {
  for (auto& p : params.tensors()) {
    const double g =
        2.0 * (p.group == ParamGroup::kTrunk ? gamma_theta : gamma_w);
    if (g == 0.0) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      p.grad[i] += g * p.value[i];
    }
  }
}

RelationshipTerm relationship_term(const Matrix& w, const TaskCovariance& cov) {
  if (w.cols != cov.omega.order()) {
    throw input_error("task matrix has " + std::to_string(w.cols) +
                      " columns but the covariance has order " +
                      std::to_string(cov.omega.order()));
  }
  RelationshipTerm t;
  Matrix w_oi = matmul_sym(w, cov.omega_inverse);
  t.value = 0.0;
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) t.value += w(i, j) * w_oi(i, j);
  t.grad = std::move(w_oi);
  for (double& x : t.grad.v) x *= 2.0;
  return t;
}

std::string LossBreakdown::csv_header() {
  return "aesthetic_ce,semantic_bce,aux_aesthetic_ce,reg_theta,reg_w,"
         "reg_lambda,relationship,total";
}

std::string LossBreakdown::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g",
                aesthetic_ce, semantic_bce, aux_aesthetic_ce, reg_theta, reg_w,
                reg_lambda, relationship, total);
  return buf;
}

namespace {

double combine_total(const LossBreakdown& b, const LossSettings& cfg) {
  return b.aesthetic_ce + cfg.lambda * b.semantic_bce + b.aux_aesthetic_ce +
         cfg.gamma_theta * b.reg_theta + cfg.gamma_w * b.reg_w + b.reg_lambda +
         cfg.gamma_omega * b.relationship;
}

}  // namespace

TotalLoss total_loss(const ForwardTrace& trace, const BatchLabels& labels,
                     const ParamStore& params, const TaskCovariance* omega,
                     const LossSettings& cfg) {
  const Tensor& la = trace.aesthetic_logits();
  const Tensor& ls = trace.semantic_logits();
  const std::size_t batch = la.n;
  if (labels.y.size() != batch || labels.attributes != ls.c) {
    throw input_error("label batch does not match the forward trace");
  }
  if (cfg.relationship && omega == nullptr) {
    throw config_error(
        "relationship learning is enabled but no task covariance was given");
  }

  TotalLoss out;
  out.d_aesthetic = Tensor(batch, 1, 1, la.c);
  out.d_semantic = Tensor(batch, 1, 1, ls.c);
  const double inv_b = 1.0 / static_cast<double>(batch);

  for (std::size_t n = 0; n < batch; ++n) {
    ScalarLoss a = softmax_ce({la.sample(n), la.c}, labels.y[n]);
    out.breakdown.aesthetic_ce += a.loss * inv_b;
    for (std::size_t c = 0; c < la.c; ++c)
      out.d_aesthetic.sample(n)[c] = a.grad[c] * inv_b;

    ScalarLoss s = semantic_bce({ls.sample(n), ls.c}, labels.sample_z(n));
    out.breakdown.semantic_bce += s.loss * inv_b;
    for (std::size_t m = 0; m < ls.c; ++m)
      out.d_semantic.sample(n)[m] = cfg.lambda * s.grad[m] * inv_b;
  }

  if (trace.has_aux()) {
    const Tensor& lx = trace.aux_logits();
    out.d_aux = Tensor(batch, 1, 1, lx.c);
    for (std::size_t n = 0; n < batch; ++n) {
      ScalarLoss a = softmax_ce({lx.sample(n), lx.c}, labels.y[n]);
      out.breakdown.aux_aesthetic_ce += a.loss * inv_b;
      for (std::size_t c = 0; c < lx.c; ++c)
        out.d_aux.sample(n)[c] = a.grad[c] * inv_b;
    }
  }

  const L2Terms l2 = l2_terms(params);
  out.breakdown.reg_theta = l2.reg_theta;
  out.breakdown.reg_w = l2.reg_w;
  out.breakdown.reg_lambda = lambda_prior(cfg.lambda, cfg.mu);

  if (cfg.relationship) {
    Matrix w = params.task_matrix(cfg.include_aux_in_relationship);
    out.breakdown.relationship = relationship_term(w, *omega).value;
  }

  out.breakdown.total = combine_total(out.breakdown, cfg);
  return out;
}

double total_loss_value(const Tensor& aesthetic_logits,
                        const Tensor& semantic_logits, const Tensor* aux_logits,
                        const BatchLabels& labels, const L2Terms& l2,
                        double relationship_value, const LossSettings& cfg) {
  LossBreakdown b;
  const std::size_t batch = aesthetic_logits.n;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    b.aesthetic_ce +=
        softmax_ce({aesthetic_logits.sample(n), aesthetic_logits.c},
                   labels.y[n])
            .loss *
        inv_b;
    b.semantic_bce +=
        semantic_bce({semantic_logits.sample(n), semantic_logits.c},
                     labels.sample_z(n))
            .loss *
        inv_b;
    if (aux_logits) {
      b.aux_aesthetic_ce +=
          softmax_ce({aux_logits->sample(n), aux_logits->c}, labels.y[n])
              .loss *
          inv_b;
    }
  }
  b.reg_theta = l2.reg_theta;
  b.reg_w = l2.reg_w;
  b.reg_lambda = lambda_prior(cfg.lambda, cfg.mu);
  b.relationship = relationship_value;
  return combine_total(b, cfg);
}

}  // namespace mtaesth
