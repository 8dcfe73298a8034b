#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mtaesth/errors.hpp"
#include "mtaesth/objectives.hpp"
#include "mtaesth/rng.hpp"

using namespace mtaesth;

namespace {

// central finite difference of a scalar function of one logit
template <typename F>
double fd(F f, std::vector<double> logits, std::size_t i, double eps = 1e-6) {
  logits[i] += eps;
  const double hi = f(logits);
  logits[i] -= 2 * eps;
  const double lo = f(logits);
  return (hi - lo) / (2 * eps);
}

ParamStore toy_store(std::size_t d, std::size_t c, std::size_t m, Rng& rng,
                     bool zero = false) {
  ParamStore store;
  ParamTensor trunk;
  trunk.name = "trunk.dense1.weight";
  trunk.group = ParamGroup::kTrunk;
  trunk.shape = {3, 3};
  trunk.value.assign(9, 0.0);
  ParamTensor wa;
  wa.name = "head_aesthetic.dense1.weight";
  wa.group = ParamGroup::kHeadAesthetic;
  wa.shape = {d, c};
  wa.value.assign(d * c, 0.0);
  ParamTensor ws;
  ws.name = "head_semantic.dense1.weight";
  ws.group = ParamGroup::kHeadSemantic;
  ws.shape = {d, m};
  ws.value.assign(d * m, 0.0);
  if (!zero) {
    for (double& x : trunk.value) x = rng.normal();
    for (double& x : wa.value) x = rng.normal();
    for (double& x : ws.value) x = rng.normal();
  }
  store.add(std::move(trunk));
  const std::size_t ia = store.add(std::move(wa));
  const std::size_t is = store.add(std::move(ws));
  store.set_task_heads(ia, is, std::nullopt);
  return store;
}

}  // namespace

TEST_CASE("softmax_ce: uniform logits") {
  ScalarLoss r = softmax_ce(std::vector<double>{0.0, 0.0}, 0);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(r.grad[0] == doctest::Approx(-0.5));
  CHECK(r.grad[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax_ce: extreme logits do not overflow") {
  ScalarLoss r = softmax_ce(std::vector<double>{1000.0, -1000.0}, 0);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss < 1e-12);
  ScalarLoss wrong = softmax_ce(std::vector<double>{1000.0, -1000.0}, 1);
  CHECK(std::isfinite(wrong.loss));
  CHECK(wrong.loss > 100.0);
}

TEST_CASE("softmax_ce gradient matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(4);
    for (double& l : logits) l = 2.0 * rng.normal();
    const std::size_t label = trial % 4;
    ScalarLoss r = softmax_ce(logits, label);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double want = fd(
          [&](const std::vector<double>& l) {
            return softmax_ce(l, label).loss;
          },
          logits, i);
      CHECK(std::abs(r.grad[i] - want) < 1e-6);
    }
  }
}

TEST_CASE("softmax_ce rejects out-of-range labels") {
  CHECK_THROWS_AS(softmax_ce(std::vector<double>{0.0, 0.0}, 2), input_error);
}

TEST_CASE("semantic_bce: sigmoid(0) cases") {
  std::vector<std::uint8_t> ones(4, 1);
  ScalarLoss r = semantic_bce(std::vector<double>(4, 0.0), ones);
  CHECK(r.loss == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  for (double g : r.grad) CHECK(g == doctest::Approx(-0.5));
}

TEST_CASE("semantic_bce: saturated correct prediction") {
  std::vector<std::uint8_t> one(1, 1);
  ScalarLoss r = semantic_bce(std::vector<double>{50.0}, one);
  CHECK(r.loss < 1e-20);
  std::vector<std::uint8_t> zero(1, 0);
  ScalarLoss miss = semantic_bce(std::vector<double>{50.0}, zero);
  CHECK(miss.loss == doctest::Approx(50.0).epsilon(1e-9));
}

TEST_CASE("semantic_bce gradient matches finite differences") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(5);
    std::vector<std::uint8_t> z(5);
    for (double& l : logits) l = 3.0 * rng.normal();
    for (auto& b : z) b = rng.bernoulli(0.5) ? 1 : 0;
    ScalarLoss r = semantic_bce(logits, z);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double want = fd(
          [&](const std::vector<double>& l) {
            return semantic_bce(l, z).loss;
          },
          logits, i);
      CHECK(std::abs(r.grad[i] - want) < 1e-6);
    }
  }
}

TEST_CASE("semantic_bce decomposes over attributes") {
  Rng rng(5);
  std::vector<double> logits(6);
  std::vector<std::uint8_t> z(6);
  for (double& l : logits) l = rng.normal();
  for (auto& b : z) b = rng.bernoulli(0.5) ? 1 : 0;
  const double joint = semantic_bce(logits, z).loss;
  double separate = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    separate += semantic_bce(std::vector<double>{logits[i]},
                             std::vector<std::uint8_t>{z[i]})
                    .loss;
  }
  CHECK(joint == doctest::Approx(separate).epsilon(1e-12));
}

TEST_CASE("semantic_bce rejects non-binary labels") {
  std::vector<std::uint8_t> bad = {0, 2};
  CHECK_THROWS_AS(semantic_bce(std::vector<double>{0.0, 0.0}, bad),
                  input_error);
}

TEST_CASE("l2_terms: zero store and single weight") {
  Rng rng(6);
  ParamStore zero = toy_store(3, 2, 4, rng, true);
  L2Terms t0 = l2_terms(zero);
  CHECK(t0.reg_theta == 0.0);
  CHECK(t0.reg_w == 0.0);

  zero.tensor(0).value[4] = 3.0;  // one trunk weight
  L2Terms t1 = l2_terms(zero);
  CHECK(t1.reg_theta == doctest::Approx(9.0));
  CHECK(t1.reg_w == 0.0);
}

TEST_CASE("l2_terms matches the elementwise oracle") {
  Rng rng(7);
  ParamStore store = toy_store(3, 2, 4, rng);
  double theta = 0.0, w = 0.0;
  for (const auto& t : store.tensors()) {
    for (double x : t.value) {
      (t.group == ParamGroup::kTrunk ? theta : w) += x * x;
    }
  }
  L2Terms t = l2_terms(store);
  CHECK(t.reg_theta == doctest::Approx(theta).epsilon(1e-14));
  CHECK(t.reg_w == doctest::Approx(w).epsilon(1e-14));
}

TEST_CASE("add_l2_gradients scales by 2*gamma per group") {
  Rng rng(8);
  ParamStore store = toy_store(3, 2, 4, rng);
  store.zero_grads();
  add_l2_gradients(store, 0.1, 0.01);
  for (const auto& t : store.tensors()) {
    const double g = t.group == ParamGroup::kTrunk ? 0.1 : 0.01;
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(t.grad[i] == doctest::Approx(2.0 * g * t.value[i]));
    }
  }
}

TEST_CASE("relationship_term: scaled identity reduces to a Frobenius norm") {
  Rng rng(9);
  ParamStore store = toy_store(3, 2, 4, rng);
  Matrix w = store.task_matrix();
  const std::size_t subtasks = 6;
  SymMatrix uniform(subtasks);
  for (std::size_t i = 0; i < subtasks; ++i) {
    uniform.at(i, i) = 1.0 / static_cast<double>(subtasks);
  }
  TaskCovariance cov = TaskCovariance::from_omega(uniform, 0.0);
  RelationshipTerm t = relationship_term(w, cov);
  CHECK(t.value ==
        doctest::Approx(static_cast<double>(subtasks) * frobenius_sq(w))
            .epsilon(1e-9));

  // general c * I: value = (1/c) ||W||_F^2
  SymMatrix omega(subtasks);
  for (std::size_t i = 0; i < subtasks; ++i) omega.at(i, i) = 0.25;
  TaskCovariance cov2 = TaskCovariance::from_omega(omega, 0.0);
  RelationshipTerm t2 = relationship_term(w, cov2);
  CHECK(t2.value == doctest::Approx(4.0 * frobenius_sq(w)).epsilon(1e-9));
}

TEST_CASE("relationship_term: zero matrix") {
  Rng rng(10);
  ParamStore store = toy_store(3, 2, 4, rng, true);
  Matrix w = store.task_matrix();
  TaskCovariance cov = TaskCovariance::uniform(6);
  RelationshipTerm t = relationship_term(w, cov);
  CHECK(t.value == 0.0);
  for (double g : t.grad.v) CHECK(g == 0.0);
}

TEST_CASE("relationship_term gradient matches finite differences") {
  Rng rng(11);
  Matrix w(4, 5);
  for (double& x : w.v) x = rng.normal();
  Matrix a(5, 5);
  for (double& x : a.v) x = rng.normal();
  SymMatrix spd = gram(a);
  for (std::size_t i = 0; i < 5; ++i) spd.at(i, i) += 1.0;
  TaskCovariance cov = TaskCovariance::from_omega(spd, 0.0);

  RelationshipTerm t = relationship_term(w, cov);
  CHECK(t.value >= -1e-10);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < w.v.size(); ++i) {
    Matrix wp = w;
    wp.v[i] += eps;
    const double hi = relationship_term(wp, cov).value;
    wp.v[i] -= 2 * eps;
    const double lo = relationship_term(wp, cov).value;
    const double want = (hi - lo) / (2 * eps);
    CHECK(std::abs(t.grad.v[i] - want) < 1e-5);
  }
}

TEST_CASE("relationship_term rejects a dimension mismatch") {
  Matrix w(4, 5);
  TaskCovariance cov = TaskCovariance::uniform(6);
  CHECK_THROWS_AS(relationship_term(w, cov), input_error);
}

TEST_CASE("lambda_prior closed forms") {
  CHECK(lambda_prior(0.37, 0.37) == 0.0);
  CHECK(lambda_prior(1.0 / 29.0, 0.0) ==
        doctest::Approx(1.0 / 841.0).epsilon(1e-15));
  CHECK(lambda_prior(1.0, 1.0 / 29.0) ==
        doctest::Approx((28.0 / 29.0) * (28.0 / 29.0)).epsilon(1e-15));
}

TEST_CASE("balance policies resolve the strategy weights") {
  BalancePolicy p29 = BalancePolicy::strategy(29, Variant::kMtcnn1);
  CHECK(p29.lambda == doctest::Approx(1.0 / 29.0));
  BalancePolicy pe = BalancePolicy::strategy(29, Variant::kEnhanced);
  CHECK(pe.lambda == doctest::Approx(2.0 / 29.0));
  CHECK(BalancePolicy::none(8).lambda == 0.0);
  CHECK(BalancePolicy::equal(8).lambda == 1.0);
}

TEST_CASE("total_loss with lambda=0 ignores the semantic logits") {
  ArchitectureConfig arch =
      default_architecture(Variant::kMtcnn1, 18, 18, 3, 2, 4,
                           {{4, 6, 6, 6}, {3, 3, 2, 2}, {16, 8}});
  auto [graph, params] = build(arch, 42);
  Tensor batch(2, 18, 18, 3);
  Rng rng(12);
  for (double& x : batch.v) x = rng.uniform() - 0.5;
  BatchLabels labels;
  labels.attributes = 4;
  labels.y = {0, 1};
  labels.z = {1, 0, 1, 0, 0, 1, 0, 1};

  ForwardTrace trace;
  graph.forward(params, batch, trace);
  LossSettings cfg;
  cfg.lambda = 0.0;
  TotalLoss a = total_loss(trace, labels, params, nullptr, cfg);

  // corrupt the semantic logits in the trace; the total must not move
  ForwardTrace hacked;
  graph.forward(params, batch, hacked);
  for (double& x : hacked.segments[kSegSemantic].acts.back().v) x += 13.0;
  TotalLoss b = total_loss(hacked, labels, params, nullptr, cfg);
  CHECK(a.breakdown.total == doctest::Approx(b.breakdown.total).epsilon(1e-15));
  for (double g : a.d_semantic.v) CHECK(g == 0.0);
}

TEST_CASE("total_loss recombination invariant") {
  ArchitectureConfig arch =
      default_architecture(Variant::kEnhanced, 18, 18, 3, 2, 4,
                           {{4, 6, 6, 6}, {3, 3, 2, 2}, {16, 8}});
  auto [graph, params] = build(arch, 43);
  Tensor batch(3, 18, 18, 3);
  Rng rng(13);
  for (double& x : batch.v) x = rng.uniform() - 0.5;
  BatchLabels labels;
  labels.attributes = 4;
  labels.y = {0, 1, 1};
  labels.z.assign(12, 0);
  for (auto& z : labels.z) z = rng.bernoulli(0.5) ? 1 : 0;

  TaskCovariance omega = TaskCovariance::uniform(6);
  LossSettings cfg;
  cfg.lambda = 0.5;
  cfg.mu = 0.25;
  cfg.gamma_theta = 1e-3;
  cfg.gamma_w = 2e-3;
  cfg.gamma_omega = 1e-2;
  cfg.relationship = true;

  ForwardTrace trace;
  graph.forward(params, batch, trace);
  TotalLoss r = total_loss(trace, labels, params, &omega, cfg);
  const LossBreakdown& b = r.breakdown;
  const double recombined = b.aesthetic_ce + cfg.lambda * b.semantic_bce +
                            b.aux_aesthetic_ce + cfg.gamma_theta * b.reg_theta +
                            cfg.gamma_w * b.reg_w + b.reg_lambda +
                            cfg.gamma_omega * b.relationship;
  CHECK(b.total == doctest::Approx(recombined).epsilon(1e-15));
  CHECK(b.aux_aesthetic_ce > 0.0);
  CHECK(b.reg_lambda == doctest::Approx(lambda_prior(0.5, 0.25)));
}

TEST_CASE("total_loss requires omega when relationship learning is on") {
  ArchitectureConfig arch =
      default_architecture(Variant::kMtcnn1, 18, 18, 3, 2, 4,
                           {{4, 6, 6, 6}, {3, 3, 2, 2}, {16, 8}});
  auto [graph, params] = build(arch, 44);
  Tensor batch(1, 18, 18, 3);
  BatchLabels labels;
  labels.attributes = 4;
  labels.y = {0};
  labels.z.assign(4, 0);
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  LossSettings cfg;
  cfg.relationship = true;
  CHECK_THROWS_AS(total_loss(trace, labels, params, nullptr, cfg),
                  config_error);
}
