#include "mtaesth/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include "mtaesth/checkpoint.hpp"
#include "mtaesth/errors.hpp"
#include "mtaesth/evaluate.hpp"
#include "mtaesth/rng.hpp"

namespace mtaesth {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw config_error("learning rate must be positive");
  if (lr_decay <= 0.0) throw config_error("lr decay factor must be positive");
  if (lr_decay_epochs == 0) throw config_error("lr decay interval must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw config_error("momentum must lie in [0,1)");
  }
  if (batch == 0) throw config_error("batch size must be >= 1");
  if (omega_interval_epochs == 0) {
    throw config_error("omega update interval must be >= 1");
  }
  if (gamma_theta < 0.0 || gamma_w < 0.0 || gamma_omega < 0.0) {
    throw config_error("regularization weights must be nonnegative");
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::vector<std::string> subtask_names(std::size_t classes,
                                       const std::vector<std::string>& attrs) {
  std::vector<std::string> names;
  if (classes == 2) {
    names = {"aesthetic_low", "aesthetic_high"};
  } else {
    for (std::size_t c = 0; c < classes; ++c) {
      names.push_back("aesthetic_" + std::to_string(c));
    }
  }
  names.insert(names.end(), attrs.begin(), attrs.end());
  return names;
}

std::string TrainReport::report_csv() const {
  std::ostringstream out;
  out << "epoch," << LossBreakdown::csv_header() << ",accuracy";
  const std::size_t m = epochs.empty() ? 0 : epochs.front().attr_ap.size();
  for (std::size_t a = 0; a < m; ++a) out << ",ap_" << a;
  out << ",lambda\n";
  char buf[64];
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    const EpochRow& row = epochs[e];
    out << e << "," << row.losses.csv_row();
    std::snprintf(buf, sizeof(buf), ",%.12g", row.accuracy);
    out << buf;
    for (double ap : row.attr_ap) {
      std::snprintf(buf, sizeof(buf), ",%.12g", ap);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.12g", row.lambda);
    out << buf << "\n";
  }
  return out.str();
}

std::string TrainReport::omega_csv(const SymMatrix& m, std::size_t classes,
                                   const std::vector<std::string>& attrs) {
  const std::vector<std::string> names = subtask_names(classes, attrs);
  if (names.size() != m.order()) {
    throw input_error("subtask names do not match the matrix order");
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << (i ? "," : "") << names[i];
  }
  out << "\n";
  char buf[48];
  for (std::size_t i = 0; i < m.order(); ++i) {
    for (std::size_t j = 0; j < m.order(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.at(i, j));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Omega update and early stopping
// ---------------------------------------------------------------------------

TaskCovariance update_omega(const Matrix& w, double ridge) {
  bool any = false;
  for (double x : w.v) {
    if (!std::isfinite(x)) throw input_error("task matrix has non-finite entries");
    any |= x != 0.0;
  }
  if (!any) {
    throw degenerate_error("task matrix is identically zero; the covariance "
                           "update is undefined");
  }
  SymMatrix g = gram(w);
  if (ridge < 0.0) ridge = kDefaultJitter * g.trace();
  for (std::size_t i = 0; i < g.order(); ++i) g.at(i, i) += ridge;
  SymMatrix root = psd_sqrt(g);
  const double t = root.trace();
  if (!(t > 0.0)) {
    throw degenerate_error("covariance square root has nonpositive trace");
  }
  SymMatrix omega(root.order());
  for (std::size_t i = 0; i < root.order(); ++i) {
    for (std::size_t j = 0; j < root.order(); ++j) {
      omega.at(i, j) = root.at(i, j) / t;
    }
  }
  return TaskCovariance::from_omega(std::move(omega), kDefaultJitter);
}

EarlyStopDecision early_stop_monitor(const std::vector<double>& semantic_loss,
                                     std::size_t patience) {
  if (semantic_loss.empty()) {
    throw input_error("early stop monitor needs a nonempty history");
  }
  if (semantic_loss.size() < patience + 1) return EarlyStopDecision::kContinue;
  const double old = semantic_loss[semantic_loss.size() - 1 - patience];
  const double now = semantic_loss.back();
  const double rel = (old - now) / std::max(std::abs(old), 1e-12);
  return rel < 1e-3 ? EarlyStopDecision::kFreeze : EarlyStopDecision::kContinue;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(const ParamStore& params, double momentum)
    : momentum_(momentum) {
  for (const auto& t : params.tensors()) {
    velocity_.emplace_back(t.size(), 0.0);
  }
}

void SgdOptimizer::step(ParamStore& params, double lr) {
  for (std::size_t i = 0; i < velocity_.size(); ++i) {
    auto& t = params.tensor(i);
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = momentum_ * v[k] + t.grad[k];
      t.value[k] -= lr * v[k];
    }
  }
}

namespace {

double resolve_lambda(const BalancePolicy& policy, bool frozen, bool masked) {
  if (masked) return 0.0;
  if (policy.mode == BalanceMode::kEarlyStop && frozen) return 0.0;
  return policy.lambda;
}

TrainResult train_impl(const TrainConfig& config, const Dataset& data,
                       const std::vector<LabeledIndex>& train_records,
                       const Checkpoint* init_from) {
  config.validate();
  if (train_records.empty()) throw data_error("training split is empty");
  if (data.attributes != config.arch.attributes) {
    throw input_error("dataset has " + std::to_string(data.attributes) +
                      " attributes but the architecture expects " +
                      std::to_string(config.arch.attributes));
  }

  auto [graph, params] = build(config.arch, config.seed);
  TrainResult result{std::move(graph), std::move(params), {}};
  if (init_from != nullptr) {
    install_params(*init_from, result.params);
    result.report.channel_means = init_from->channel_means;
  } else {
    result.report.channel_means = channel_means(data, train_records);
  }
  const auto& means = result.report.channel_means;

  const std::size_t m = config.arch.attributes;
  const std::size_t crop_h = config.arch.input_h;
  const std::size_t crop_w = config.arch.input_w;

  SgdOptimizer opt(result.params, config.momentum);
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng aug_rng(derive_seed(config.seed, "augment"));

  std::optional<TaskCovariance> omega;
  if (config.relationship) {
    omega = TaskCovariance::uniform(config.arch.classes + m +
                                    (config.relationship_include_aux
                                         ? config.arch.classes
                                         : 0));
  }

  bool frozen = false;
  std::vector<double> semantic_history;
  std::vector<std::size_t> order(train_records.size());
  std::iota(order.begin(), order.end(), 0);

  ForwardTrace trace;
  Tensor batch;
  BatchLabels labels;
  labels.attributes = m;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lambda = resolve_lambda(config.policy, frozen,
                                         config.mask_semantic);
    LossSettings settings;
    settings.lambda = lambda;
    settings.mu = config.policy.mu;
    settings.gamma_theta = config.gamma_theta;
    settings.gamma_w = config.gamma_w;
    settings.gamma_omega = config.gamma_omega;
    settings.relationship = config.relationship;
    settings.include_aux_in_relationship = config.relationship_include_aux;

    const double lr =
        config.learning_rate *
        std::pow(config.lr_decay,
                 static_cast<double>(epoch / config.lr_decay_epochs));

    shuffle_rng.shuffle(order);

    EpochRow row;
    row.lambda = lambda;
    std::size_t batches = 0;
    std::size_t correct = 0;
    std::vector<std::vector<double>> epoch_scores(m);
    std::vector<std::vector<std::uint8_t>> epoch_pos(m);

    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t b = std::min(config.batch, order.size() - start);
      if (batch.n != b) batch = Tensor(b, crop_h, crop_w, 3);
      labels.y.resize(b);
      labels.z.assign(b * m, 0);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& [rec, y] = train_records[order[start + i]];
        augment(data, data.records[rec], aug_rng, crop_h, crop_w, means,
                batch.sample(i));
        labels.y[i] = y;
        const auto& z = data.records[rec].semantic;
        std::copy(z.begin(), z.end(), labels.z.begin() + i * m);
      }

      result.graph.forward(result.params, batch, trace);
      TotalLoss loss = total_loss(trace, labels, result.params,
                                  omega ? &*omega : nullptr, settings);
      if (!std::isfinite(loss.breakdown.total)) {
        throw train_error("non-finite loss at epoch " + std::to_string(epoch) +
                          ", step " + std::to_string(batches));
      }

      result.graph.backward(result.params, trace, loss.d_aesthetic,
                            loss.d_semantic,
                            trace.has_aux() ? &loss.d_aux : nullptr);
      add_l2_gradients(result.params, config.gamma_theta, config.gamma_w);
      if (config.relationship) {
        Matrix w = result.params.task_matrix(config.relationship_include_aux);
        RelationshipTerm rel = relationship_term(w, *omega);
        for (double& x : rel.grad.v) x *= config.gamma_omega;
        result.params.add_task_matrix_grad(rel.grad,
                                           config.relationship_include_aux);
      }
      opt.step(result.params, lr);

      // running statistics
      const LossBreakdown& bd = loss.breakdown;
      row.losses.aesthetic_ce += bd.aesthetic_ce;
      row.losses.semantic_bce += bd.semantic_bce;
      row.losses.aux_aesthetic_ce += bd.aux_aesthetic_ce;
      row.losses.reg_theta += bd.reg_theta;
      row.losses.reg_w += bd.reg_w;
      row.losses.reg_lambda += bd.reg_lambda;
      row.losses.relationship += bd.relationship;
      row.losses.total += bd.total;
      ++batches;

      const Tensor& la = trace.aesthetic_logits();
      const Tensor& ls = trace.semantic_logits();
      for (std::size_t i = 0; i < b; ++i) {
        const double* lg = la.sample(i);
        std::size_t pred = 0;
        for (std::size_t c = 1; c < la.c; ++c) {
          if (lg[c] > lg[pred]) pred = c;
        }
        if (pred == labels.y[i]) ++correct;
        for (std::size_t a = 0; a < m; ++a) {
          epoch_scores[a].push_back(1.0 /
                                    (1.0 + std::exp(-ls.sample(i)[a])));
          epoch_pos[a].push_back(labels.z[i * m + a]);
        }
      }
    }

    const double inv = 1.0 / static_cast<double>(batches);
    row.losses.aesthetic_ce *= inv;
    row.losses.semantic_bce *= inv;
    row.losses.aux_aesthetic_ce *= inv;
    row.losses.reg_theta *= inv;
    row.losses.reg_w *= inv;
    row.losses.reg_lambda *= inv;
    row.losses.relationship *= inv;
    row.losses.total *= inv;
    row.accuracy =
        static_cast<double>(correct) / static_cast<double>(order.size());
    row.attr_ap.resize(m);
    for (std::size_t a = 0; a < m; ++a) {
      row.attr_ap[a] = average_precision(epoch_scores[a], epoch_pos[a]);
    }
    result.report.epochs.push_back(std::move(row));

    if (config.relationship &&
        (epoch + 1) % config.omega_interval_epochs == 0) {
      Matrix w = result.params.task_matrix(config.relationship_include_aux);
      OmegaUpdateEvent ev;
      ev.epoch = epoch;
      ev.objective_before = relationship_term(w, *omega).value;
      TaskCovariance next = update_omega(w);
      ev.objective_after = relationship_term(w, next).value;
      result.report.omega_events.push_back(ev);
      omega = std::move(next);
    }

    if (config.policy.mode == BalanceMode::kEarlyStop && !frozen) {
      semantic_history.push_back(
          result.report.epochs.back().losses.semantic_bce);
      if (early_stop_monitor(semantic_history, config.policy.patience) ==
          EarlyStopDecision::kFreeze) {
        frozen = true;
      }
    }
  }

  if (omega) {
    result.report.final_omega = omega->omega;
    result.report.final_correlation = covariance_to_correlation(omega->omega);
  }
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data,
                  const std::vector<LabeledIndex>& train_records) {
  return train_impl(config, data, train_records, nullptr);
}

TrainResult finetune(const std::string& checkpoint_path,
                     const TrainConfig& config, const Dataset& data,
                     const std::vector<LabeledIndex>& train_records) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (ckpt.arch.serialize() != config.arch.serialize()) {
    // still allow it when the tensors line up; install_params reports the
    // precise mismatches otherwise
  }
  return train_impl(config, data, train_records, &ckpt);
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

namespace {

constexpr double kFdEps = 1e-4;

struct RelClosedForm {
  // For a head-final weight entry at task-matrix position (r, c):
  // rel(x + d) - rel(x) = 2 d (W Omega^{-1})(r,c) + d^2 Omega^{-1}(c,c).
  Matrix w_omega_inv;
  const SymMatrix* omega_inv = nullptr;
  double base = 0.0;
};

struct TensorRelMap {
  bool in_task_matrix = false;
  std::size_t col_offset = 0;  ///< task-matrix column of this tensor's unit 0
};

GradCheckReport run_check(const LayerGraph& graph, const ParamStore& params,
                          const std::vector<std::vector<double>>& analytic,
                          const Tensor& batch, const BatchLabels& labels,
                          const TaskCovariance* omega,
                          const LossSettings& settings, std::size_t threads) {
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  const L2Terms l2_base = l2_terms(params);

  RelClosedForm rel;
  if (settings.relationship) {
    Matrix w = params.task_matrix(settings.include_aux_in_relationship);
    RelationshipTerm t = relationship_term(w, *omega);
    rel.base = t.value;
    rel.w_omega_inv = std::move(t.grad);
    for (double& x : rel.w_omega_inv.v) x *= 0.5;
    rel.omega_inv = &omega->omega_inverse;
  }

  // map the final head weights onto task-matrix columns for the
  // closed-form relationship adjustment
  std::vector<TensorRelMap> rel_map(params.count());
  if (settings.relationship) {
    std::size_t offset = 0;
    auto mark = [&](std::size_t tensor_idx) {
      rel_map[tensor_idx].in_task_matrix = true;
      rel_map[tensor_idx].col_offset = offset;
      offset += params.tensor(tensor_idx).shape[1];
    };
    if (settings.include_aux_in_relationship) {
      mark(*params.head_aux_index());
    }
    mark(params.head_aesthetic_index());
    mark(params.head_semantic_index());
  }

  if (threads == 0) {
    threads = std::max(1u, std::min(std::thread::hardware_concurrency(), 8u));
  }

  struct Best {
    double err = -1.0;
    std::size_t tensor = 0;
    std::size_t entry = 0;
    double analytic = 0.0;
    double fd = 0.0;
  };
  std::vector<Best> best(threads);
  std::vector<std::size_t> counted(threads, 0);

  // flat work list of (tensor, entry-range) split contiguously
  std::vector<std::pair<std::size_t, std::size_t>> index;  // tensor, entry
  for (std::size_t t = 0; t < params.count(); ++t) {
    for (std::size_t e = 0; e < params.tensor(t).size(); ++e) {
      index.push_back({t, e});
    }
  }

  auto worker = [&](std::size_t tid) {
    auto scratch = graph.make_replay_scratch();
    Tensor d_aes, d_sem, d_aux;
    Tensor la_pert, ls_pert, lx_pert;
    const Tensor& la = trace.aesthetic_logits();
    const Tensor& ls = trace.semantic_logits();
    const bool has_aux = trace.has_aux();

    const std::size_t chunk = (index.size() + threads - 1) / threads;
    const std::size_t begin = tid * chunk;
    const std::size_t end = std::min(index.size(), begin + chunk);
    for (std::size_t k = begin; k < end; ++k) {
      const auto [ti, entry] = index[k];
      const ParamTensor& t = params.tensor(ti);

      graph.logit_sensitivity(params, trace, ti, entry, *scratch, d_aes, d_sem,
                              has_aux ? &d_aux : nullptr);

      if (!la_pert.same_shape(la)) la_pert = Tensor(la.n, 1, 1, la.c);
      if (!ls_pert.same_shape(ls)) ls_pert = Tensor(ls.n, 1, 1, ls.c);
      if (has_aux && !lx_pert.same_shape(trace.aux_logits())) {
        lx_pert = Tensor(trace.aux_logits().n, 1, 1, trace.aux_logits().c);
      }

      const double x = t.value[entry];
      double fd_losses[2];
      for (int side = 0; side < 2; ++side) {
        const double d = side == 0 ? kFdEps : -kFdEps;
        for (std::size_t i = 0; i < la_pert.size(); ++i) {
          la_pert.v[i] = la.v[i] + d * d_aes.v[i];
        }
        for (std::size_t i = 0; i < ls_pert.size(); ++i) {
          ls_pert.v[i] = ls.v[i] + d * d_sem.v[i];
        }
        if (has_aux) {
          const Tensor& lx = trace.aux_logits();
          for (std::size_t i = 0; i < lx_pert.size(); ++i) {
            lx_pert.v[i] = lx.v[i] + d * d_aux.v[i];
          }
        }
        L2Terms l2 = l2_base;
        const double bump = (x + d) * (x + d) - x * x;
        if (t.group == ParamGroup::kTrunk) {
          l2.reg_theta += bump;
        } else {
          l2.reg_w += bump;
        }
        double rel_value = rel.base;
        if (settings.relationship && rel_map[ti].in_task_matrix) {
          const std::size_t u = t.shape[1];
          const std::size_t col = rel_map[ti].col_offset + entry % u;
          const std::size_t r = entry / u;
          rel_value += 2.0 * d * rel.w_omega_inv(r, col) +
                       d * d * rel.omega_inv->at(col, col);
        }
        fd_losses[side] = total_loss_value(la_pert, ls_pert,
                                           has_aux ? &lx_pert : nullptr,
                                           labels, l2, rel_value, settings);
      }
      const double fd = (fd_losses[0] - fd_losses[1]) / (2.0 * kFdEps);
      const double a = analytic[ti][entry];
      const double err =
          std::abs(a - fd) /
          std::max({std::abs(a), std::abs(fd), 1e-6});
      ++counted[tid];
      if (err > best[tid].err ||
          (err == best[tid].err &&
           std::make_pair(ti, entry) <
               std::make_pair(best[tid].tensor, best[tid].entry))) {
        best[tid] = {err, ti, entry, a, fd};
      }
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t tid = 0; tid < threads; ++tid) {
      pool.emplace_back(worker, tid);
    }
    for (auto& th : pool) th.join();
  }

  GradCheckReport report;
  Best overall;
  for (std::size_t tid = 0; tid < threads; ++tid) {
    report.checked += counted[tid];
    const Best& b = best[tid];
    if (b.err > overall.err ||
        (b.err == overall.err &&
         std::make_pair(b.tensor, b.entry) <
             std::make_pair(overall.tensor, overall.entry))) {
      overall = b;
    }
  }
  report.max_rel_error = std::max(overall.err, 0.0);
  report.worst_param = params.tensor(overall.tensor).name + "[" +
                       std::to_string(overall.entry) + "]";
  report.worst_analytic = overall.analytic;
  report.worst_fd = overall.fd;
  return report;
}

}  // namespace

GradCheckReport gradient_check_against(
    const LayerGraph& graph, const ParamStore& params,
    const std::vector<std::vector<double>>& analytic, const Tensor& batch,
    const BatchLabels& labels, const TaskCovariance* omega,
    const LossSettings& settings, std::size_t threads) {
  return run_check(graph, params, analytic, batch, labels, omega, settings,
                   threads);
}

GradCheckReport gradient_check(const ArchitectureConfig& arch,
                               const LossSettings& settings,
                               const Tensor& batch, const BatchLabels& labels,
                               std::uint64_t seed, std::size_t threads) {
  if (batch.n > 4) {
    throw input_error("gradient check batches are limited to 4 samples");
  }
  auto [graph, params] = build(arch, seed);

  std::optional<TaskCovariance> omega;
  if (settings.relationship) {
    omega = TaskCovariance::uniform(
        arch.classes + arch.attributes +
        (settings.include_aux_in_relationship ? arch.classes : 0));
  }

  ForwardTrace trace;
  graph.forward(params, batch, trace);
  TotalLoss loss =
      total_loss(trace, labels, params, omega ? &*omega : nullptr, settings);
  graph.backward(params, trace, loss.d_aesthetic, loss.d_semantic,
                 trace.has_aux() ? &loss.d_aux : nullptr);
  add_l2_gradients(params, settings.gamma_theta, settings.gamma_w);
  if (settings.relationship) {
    Matrix w = params.task_matrix(settings.include_aux_in_relationship);
    RelationshipTerm rel = relationship_term(w, *omega);
    for (double& x : rel.grad.v) x *= settings.gamma_omega;
    params.add_task_matrix_grad(rel.grad, settings.include_aux_in_relationship);
  }

  std::vector<std::vector<double>> analytic;
  for (const auto& t : params.tensors()) analytic.push_back(t.grad);

  return run_check(graph, params, analytic, batch, labels,
                   omega ? &*omega : nullptr, settings, threads);
}

}  // namespace mtaesth
