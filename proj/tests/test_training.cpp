#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mtaesth/checkpoint.hpp"
#include "mtaesth/errors.hpp"
#include "mtaesth/evaluate.hpp"
#include "mtaesth/training.hpp"

using namespace mtaesth;
namespace fs = std::filesystem;

namespace {

const ArchitectureScale kTinyScale{{4, 6, 6, 6}, {3, 3, 2, 2}, {16, 8}};

ArchitectureConfig tiny_arch(Variant v = Variant::kMtcnn1,
                             std::size_t attributes = 4) {
  return default_architecture(v, 18, 18, 3, 2, attributes, kTinyScale);
}

GenSpec tiny_gen(std::size_t m = 4) {
  GenSpec s;
  s.n = 120;
  s.m = m;
  s.height = 24;
  s.width = 24;
  s.plan.assign(m, 0.5);
  s.plan[0] = 0.85;
  s.plan[m - 1] = 0.15;
  s.noise = 0.1;
  s.seed = 33;
  return s;
}

struct TinyData {
  Dataset data;
  std::vector<LabeledIndex> records;
};

TinyData tiny_dataset(std::size_t m = 4) {
  GenSpec spec = tiny_gen(m);
  TinyData out;
  out.data = generate_synthetic(spec).dataset;
  for (std::size_t i = 0; i < out.data.records.size(); ++i) {
    const auto l = delta_label(out.data.records[i].mean_score, 5.0, 0.0);
    if (l == AestheticLabel::kDiscard) continue;
    out.records.push_back({i, l == AestheticLabel::kHigh ? 1u : 0u});
  }
  return out;
}

TrainConfig tiny_config(Variant v = Variant::kMtcnn1,
                        std::size_t attributes = 4) {
  TrainConfig c;
  c.arch = tiny_arch(v, attributes);
  c.arch.input_h = 18;
  c.arch.input_w = 18;
  c.policy = BalancePolicy::strategy(attributes, v);
  c.learning_rate = 0.02;
  c.momentum = 0.9;
  c.batch = 32;
  c.epochs = 3;
  c.seed = 11;
  return c;
}

Matrix from_cols(std::size_t d, std::initializer_list<std::vector<double>> cols) {
  Matrix w(d, cols.size());
  std::size_t j = 0;
  for (const auto& col : cols) {
    for (std::size_t i = 0; i < d; ++i) w(i, j) = col[i];
    ++j;
  }
  return w;
}

}  // namespace

TEST_CASE("update_omega: diagonal closed form") {
  // WtW = diag(4, 9) -> omega = diag(2, 3) / 5
  Matrix w = from_cols(2, {{2.0, 0.0}, {0.0, 3.0}});
  TaskCovariance cov = update_omega(w, 0.0);
  CHECK(std::abs(cov.omega.at(0, 0) - 0.4) < 1e-12);
  CHECK(std::abs(cov.omega.at(1, 1) - 0.6) < 1e-12);
  CHECK(std::abs(cov.omega.at(0, 1)) < 1e-12);
}

TEST_CASE("update_omega: orthonormal columns give the uniform covariance") {
  Matrix w = from_cols(3, {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
  TaskCovariance cov = update_omega(w, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::abs(cov.omega.at(i, j) - (i == j ? 1.0 / 3.0 : 0.0)) < 1e-12);
    }
  }
}

TEST_CASE("update_omega: invariants and optimality against perturbations") {
  Rng rng(3);
  Matrix w(6, 5);
  for (double& x : w.v) x = rng.normal();
  TaskCovariance cov = update_omega(w);

  CHECK(std::abs(cov.omega.trace() - 1.0) < 1e-8);
  auto d = sym_eigendecompose(cov.omega);
  CHECK(d.values.back() >= -1e-8);

  const double best = relationship_term(w, cov).value;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix a(5, 5);
    for (double& x : a.v) x = rng.normal();
    SymMatrix g = gram(a);
    for (std::size_t i = 0; i < 5; ++i) g.at(i, i) += 0.05;
    const double t = g.trace();
    SymMatrix feasible(5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) feasible.at(i, j) = g.at(i, j) / t;
    TaskCovariance pert = TaskCovariance::from_omega(feasible, 0.0);
    CHECK(relationship_term(w, pert).value >= best - 1e-9);
  }
}

TEST_CASE("update_omega rejects the all-zero matrix") {
  Matrix w(4, 3);
  CHECK_THROWS_AS(update_omega(w), degenerate_error);
}

TEST_CASE("early stop monitor") {
  CHECK(early_stop_monitor({3.0, 2.5, 2.0, 1.5, 1.0}, 3) ==
        EarlyStopDecision::kContinue);
  CHECK(early_stop_monitor({3.0, 1.0, 1.0, 1.0, 1.0}, 3) ==
        EarlyStopDecision::kFreeze);
  CHECK(early_stop_monitor({3.0, 2.0}, 3) == EarlyStopDecision::kContinue);
  CHECK_THROWS_AS(early_stop_monitor({}, 3), input_error);
}

TEST_CASE("sgd: momentum 0 equals the vanilla gradient step") {
  ParamStore store;
  ParamTensor t;
  t.name = "trunk.dense1.weight";
  t.group = ParamGroup::kTrunk;
  t.shape = {2};
  t.value = {1.0, -2.0};
  store.add(std::move(t));
  store.tensor(0).grad = {0.5, -0.25};

  SgdOptimizer plain(store, 0.0);
  plain.step(store, 0.1);
  CHECK(store.tensor(0).value[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  CHECK(store.tensor(0).value[1] == doctest::Approx(-2.0 + 0.1 * 0.25));
}

TEST_CASE("sgd: momentum accumulates the velocity") {
  ParamStore store;
  ParamTensor t;
  t.name = "trunk.dense1.weight";
  t.group = ParamGroup::kTrunk;
  t.shape = {1};
  t.value = {0.0};
  store.add(std::move(t));

  SgdOptimizer opt(store, 0.5);
  store.tensor(0).grad = {1.0};
  opt.step(store, 1.0);  // v=1, p=-1
  store.tensor(0).grad = {1.0};
  opt.step(store, 1.0);  // v=1.5, p=-2.5
  CHECK(store.tensor(0).value[0] == doctest::Approx(-2.5));
}

TEST_CASE("train: lambda=0 moves the semantic head only by weight decay") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.arch.input_h = cfg.arch.input_w = 18;
  cfg.policy = BalancePolicy::none(4);
  cfg.momentum = 0.0;
  cfg.epochs = 2;
  cfg.batch = 256;  // one batch per epoch
  cfg.gamma_w = 1e-3;

  auto [init_graph, init_params] = build(cfg.arch, cfg.seed);
  TrainResult r = train(cfg, td.data, td.records);

  const auto& w0 = init_params.tensor(init_params.head_semantic_index()).value;
  const auto& wk = r.params.tensor(r.params.head_semantic_index()).value;
  const double decay = 1.0 - 2.0 * cfg.learning_rate * cfg.gamma_w;
  for (std::size_t i = 0; i < w0.size(); ++i) {
    CHECK(wk[i] == doctest::Approx(w0[i] * decay * decay).epsilon(1e-12));
  }
}

TEST_CASE("train: identical seeds give identical parameters and reports") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  TrainResult a = train(cfg, td.data, td.records);
  TrainResult b = train(cfg, td.data, td.records);
  for (std::size_t i = 0; i < a.params.count(); ++i) {
    CHECK(a.params.tensor(i).value == b.params.tensor(i).value);
  }
  CHECK(a.report.report_csv() == b.report.report_csv());

  TrainConfig other = cfg;
  other.seed = 12;
  TrainResult c = train(other, td.data, td.records);
  bool differs = false;
  for (std::size_t i = 0; i < a.params.count(); ++i) {
    differs |= a.params.tensor(i).value != c.params.tensor(i).value;
  }
  CHECK(differs);
}

TEST_CASE("train: single-task reduction ignores the semantic head entirely") {
  // same pixels, different attribute width: with lambda = 0 the trunk and
  // the aesthetic head must evolve bit-identically
  TinyData td4 = tiny_dataset(4);
  TinyData td3 = td4;
  td3.data.attributes = 3;
  td3.data.attribute_names.pop_back();
  for (auto& rec : td3.data.records) rec.semantic.resize(3);

  TrainConfig cfg4 = tiny_config(Variant::kMtcnn1, 4);
  cfg4.policy = BalancePolicy::none(4);
  TrainConfig cfg3 = tiny_config(Variant::kMtcnn1, 3);
  cfg3.policy = BalancePolicy::none(3);

  TrainResult r4 = train(cfg4, td4.data, td4.records);
  TrainResult r3 = train(cfg3, td3.data, td3.records);
  for (std::size_t i = 0; i < r4.params.count(); ++i) {
    const ParamTensor& t4 = r4.params.tensor(i);
    if (t4.group == ParamGroup::kHeadSemantic) continue;
    const ParamTensor* t3 = r3.params.find(t4.name);
    REQUIRE(t3 != nullptr);
    CHECK(t4.value == t3->value);
  }
}

TEST_CASE("train: relationship run descends the omega subproblem") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.relationship = true;
  cfg.epochs = 5;
  TrainResult r = train(cfg, td.data, td.records);
  REQUIRE(r.report.omega_events.size() == 5);
  for (const auto& ev : r.report.omega_events) {
    CHECK(ev.objective_after <= ev.objective_before + 1e-9);
  }
  REQUIRE(r.report.final_omega.has_value());
  CHECK(std::abs(r.report.final_omega->trace() - 1.0) < 1e-8);
  auto d = sym_eigendecompose(*r.report.final_omega);
  CHECK(d.values.back() >= -1e-8);
  REQUIRE(r.report.final_correlation.has_value());
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.report.final_correlation->at(i, i) == 1.0);
  }
}

TEST_CASE("train: early stopping freezes the semantic task") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.policy = BalancePolicy::early_stop(4, 1);
  cfg.epochs = 6;
  // a tiny learning rate stalls the semantic loss, forcing the freeze
  cfg.learning_rate = 1e-6;
  TrainResult r = train(cfg, td.data, td.records);
  REQUIRE(r.report.epochs.size() == 6);
  CHECK(r.report.epochs.front().lambda == 1.0);
  CHECK(r.report.epochs.back().lambda == 0.0);
}

TEST_CASE("train: diverging run aborts with a diagnostic") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.learning_rate = 1e9;
  cfg.epochs = 10;
  try {
    train(cfg, td.data, td.records);
    FAIL("expected train_error");
  } catch (const train_error& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("train rejects a label-dimension mismatch") {
  TinyData td = tiny_dataset(4);
  TrainConfig cfg = tiny_config(Variant::kMtcnn1, 5);
  CHECK_THROWS_AS(train(cfg, td.data, td.records), input_error);
}

TEST_CASE("finetune: zero epochs returns the checkpoint parameters") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  TrainResult first = train(cfg, td.data, td.records);

  const fs::path dir = fs::temp_directory_path() / "mtaesth_ft";
  fs::create_directories(dir);
  const std::string ckpt = (dir / "ckpt.bin").string();
  save_checkpoint(ckpt, cfg.arch, first.report.channel_means, first.params);

  TrainConfig ft = cfg;
  ft.epochs = 0;
  ft.mask_semantic = true;
  TrainResult back = finetune(ckpt, ft, td.data, td.records);
  for (std::size_t i = 0; i < first.params.count(); ++i) {
    CHECK(back.params.tensor(i).value == first.params.tensor(i).value);
  }
}

TEST_CASE("finetune: masked run moves the semantic head only by decay") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  TrainResult first = train(cfg, td.data, td.records);

  const fs::path dir = fs::temp_directory_path() / "mtaesth_ft2";
  fs::create_directories(dir);
  const std::string ckpt = (dir / "ckpt.bin").string();
  save_checkpoint(ckpt, cfg.arch, first.report.channel_means, first.params);

  TrainConfig ft = cfg;
  ft.epochs = 2;
  ft.mask_semantic = true;
  ft.momentum = 0.0;
  ft.batch = 256;
  ft.gamma_w = 1e-3;
  TrainResult tuned = finetune(ckpt, ft, td.data, td.records);

  const auto& w0 = first.params.tensor(first.params.head_semantic_index()).value;
  const auto& wk = tuned.params.tensor(tuned.params.head_semantic_index()).value;
  const double decay = 1.0 - 2.0 * ft.learning_rate * ft.gamma_w;
  for (std::size_t i = 0; i < w0.size(); ++i) {
    CHECK(wk[i] == doctest::Approx(w0[i] * decay * decay).epsilon(1e-12));
  }
  for (const auto& row : tuned.report.epochs) CHECK(row.lambda == 0.0);
}

TEST_CASE("finetune rejects an incompatible checkpoint, listing tensors") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  TrainResult first = train(cfg, td.data, td.records);

  const fs::path dir = fs::temp_directory_path() / "mtaesth_ft3";
  fs::create_directories(dir);
  const std::string ckpt = (dir / "ckpt.bin").string();
  save_checkpoint(ckpt, cfg.arch, first.report.channel_means, first.params);

  TinyData td5 = tiny_dataset(5);
  TrainConfig other = tiny_config(Variant::kMtcnn1, 5);
  other.mask_semantic = true;
  try {
    finetune(ckpt, other, td5.data, td5.records);
    FAIL("expected checkpoint_error");
  } catch (const checkpoint_error& e) {
    CHECK(std::string(e.what()).find("head_semantic") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip preserves every tensor") {
  auto [graph, params] = build(tiny_arch(Variant::kEnhanced), 55);
  const fs::path dir = fs::temp_directory_path() / "mtaesth_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "roundtrip.bin").string();
  save_checkpoint(path, tiny_arch(Variant::kEnhanced), {0.1, 0.2, 0.3}, params);

  Checkpoint back = load_checkpoint(path);
  CHECK(back.channel_means[0] == 0.1);
  CHECK(back.arch.serialize() == tiny_arch(Variant::kEnhanced).serialize());
  auto [g2, p2] = restore_graph(back);
  REQUIRE(p2.count() == params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    CHECK(p2.tensor(i).value == params.tensor(i).value);
  }
}

TEST_CASE("gradient check leaves the parameters bit-identical") {
  auto [graph, params] = build(tiny_arch(), 77);
  Rng rng(5);
  Tensor batch(2, 18, 18, 3);
  for (double& x : batch.v) x = rng.uniform() - 0.5;
  BatchLabels labels;
  labels.attributes = 4;
  labels.y = {0, 1};
  labels.z.assign(8, 0);

  LossSettings settings;
  settings.lambda = 0.25;
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  TotalLoss loss = total_loss(trace, labels, params, nullptr, settings);
  graph.backward(params, trace, loss.d_aesthetic, loss.d_semantic, nullptr);
  add_l2_gradients(params, settings.gamma_theta, settings.gamma_w);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : params.tensors()) analytic.push_back(t.grad);

  std::vector<std::vector<double>> values_before;
  for (const auto& t : params.tensors()) values_before.push_back(t.value);

  GradCheckReport ok = gradient_check_against(graph, params, analytic, batch,
                                              labels, nullptr, settings);
  CHECK(ok.max_rel_error < 1e-4);
  for (std::size_t i = 0; i < params.count(); ++i) {
    CHECK(params.tensor(i).value == values_before[i]);
  }

  // a corrupted analytic gradient must be flagged loudly
  analytic[2][3] += 0.01;
  GradCheckReport bad = gradient_check_against(graph, params, analytic, batch,
                                               labels, nullptr, settings);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK(bad.worst_param ==
        params.tensor(2).name + "[3]");
}

TEST_CASE("evaluate: average precision definition") {
  // scores rank the positives at 1 and 3: AP = (1/1 + 2/3) / 2
  std::vector<double> scores = {0.9, 0.8, 0.7, 0.1};
  std::vector<std::uint8_t> pos = {1, 0, 1, 0};
  CHECK(average_precision(scores, pos) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK(average_precision({0.5, 0.4}, {0, 0}) == 0.0);
}

TEST_CASE("report csv has one row per epoch plus a header") {
  TinyData td = tiny_dataset();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  TrainResult r = train(cfg, td.data, td.records);
  const std::string csv = r.report.report_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("epoch,aesthetic_ce") == 0);
  // strategy lambda for M=4
  CHECK(r.report.epochs.back().lambda == doctest::Approx(0.25));
}
