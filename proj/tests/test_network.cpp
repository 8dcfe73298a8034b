#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "mtaesth/errors.hpp"
#include "mtaesth/network.hpp"
#include "mtaesth/objectives.hpp"
#include "mtaesth/rng.hpp"
#include "mtaesth/training.hpp"

using namespace mtaesth;

namespace {

// small stacks that keep per-parameter finite differences fast
const ArchitectureScale kTinyScale{{4, 6, 6, 6}, {3, 3, 2, 2}, {16, 8}};
constexpr std::size_t kTinyInput = 18;

ArchitectureConfig tiny(Variant v, std::size_t classes = 2,
                        std::size_t attributes = 4) {
  return default_architecture(v, kTinyInput, kTinyInput, 3, classes,
                              attributes, kTinyScale);
}

Tensor random_batch(std::size_t n, std::size_t hw, Rng& rng) {
  Tensor t(n, hw, hw, 3);
  for (double& x : t.v) x = rng.uniform() - 0.5;
  return t;
}

BatchLabels random_labels(std::size_t n, std::size_t classes, std::size_t m,
                          Rng& rng) {
  BatchLabels l;
  l.attributes = m;
  for (std::size_t i = 0; i < n; ++i) l.y.push_back(rng.below(classes));
  l.z.resize(n * m);
  for (auto& z : l.z) z = rng.bernoulli(0.5) ? 1 : 0;
  return l;
}

}  // namespace

TEST_CASE("build: task matrix shape Cd x (C+M) for the default mtcnn1") {
  ArchitectureConfig arch = default_architecture(Variant::kMtcnn1, 32, 32, 3,
                                                 2, 8);
  auto [graph, params] = build(arch, 1);
  Matrix w = params.task_matrix();
  CHECK(w.rows == graph.shared_dim());
  CHECK(w.rows == 64);
  CHECK(w.cols == 10);
}

TEST_CASE("build: identical seeds give bitwise-identical parameters") {
  ArchitectureConfig arch = tiny(Variant::kMtcnn2);
  auto [g1, p1] = build(arch, 77);
  auto [g2, p2] = build(arch, 77);
  REQUIRE(p1.count() == p2.count());
  for (std::size_t i = 0; i < p1.count(); ++i) {
    CHECK(p1.tensor(i).name == p2.tensor(i).name);
    CHECK(p1.tensor(i).value == p2.tensor(i).value);
  }
  auto [g3, p3] = build(arch, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < p1.count(); ++i) {
    any_diff |= p1.tensor(i).value != p3.tensor(i).value;
  }
  CHECK(any_diff);
}

TEST_CASE("build: enhanced variant carries three heads") {
  auto [graph, params] = build(tiny(Variant::kEnhanced), 5);
  bool has_aux = false;
  for (std::size_t i = 0; i < params.count(); ++i) {
    has_aux |= params.tensor(i).group == ParamGroup::kHeadAux;
  }
  CHECK(has_aux);
  CHECK(params.head_aux_index().has_value());

  Tensor batch = [&] {
    Rng rng(1);
    return random_batch(2, kTinyInput, rng);
  }();
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  CHECK(trace.has_aux());
  CHECK(trace.aux_logits().c == 2);
}

TEST_CASE("build rejects inconsistent geometry with the layer index") {
  ArchitectureConfig arch = tiny(Variant::kMtcnn1);
  arch.trunk[0] = LayerSpec::conv(25, 4);  // filter larger than the input
  try {
    build(arch, 1);
    FAIL("expected config_error");
  } catch (const config_error& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("forward: zero image through a zero-initialized dense net") {
  ArchitectureConfig arch;
  arch.variant = Variant::kMtcnn1;
  arch.input_h = 1;
  arch.input_w = 1;
  arch.input_c = 6;
  arch.classes = 2;
  arch.attributes = 3;
  arch.trunk = {LayerSpec::flatten(), LayerSpec::dense(5)};
  arch.aesthetic_head = {LayerSpec::dense(2, false)};
  arch.semantic_head = {LayerSpec::dense(3, false)};
  auto [graph, params] = build(arch, 3);
  // zero every parameter; a zero input must produce zero logits
  for (auto& t : params.tensors()) std::fill(t.value.begin(), t.value.end(), 0.0);
  Tensor batch(2, 1, 1, 6);
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  for (double v : trace.aesthetic_logits().v) CHECK(v == 0.0);
  for (double v : trace.semantic_logits().v) CHECK(v == 0.0);
}

TEST_CASE("forward: a sample's logits do not depend on its batch") {
  auto [graph, params] = build(tiny(Variant::kMtcnn3), 9);
  Rng rng(2);
  Tensor big = random_batch(4, kTinyInput, rng);
  Tensor one(1, kTinyInput, kTinyInput, 3);
  std::copy(big.sample(2), big.sample(2) + one.size(), one.v.begin());

  ForwardTrace t_big, t_one;
  graph.forward(params, big, t_big);
  graph.forward(params, one, t_one);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(t_one.aesthetic_logits().v[c] ==
          doctest::Approx(t_big.aesthetic_logits().sample(2)[c])
              .epsilon(1e-15));
  }
  for (std::size_t m = 0; m < 4; ++m) {
    CHECK(t_one.semantic_logits().v[m] ==
          doctest::Approx(t_big.semantic_logits().sample(2)[m])
              .epsilon(1e-15));
  }
}

TEST_CASE("forward: random input produces finite logits") {
  for (Variant v : {Variant::kMtcnn1, Variant::kMtcnn2, Variant::kMtcnn3,
                    Variant::kEnhanced}) {
    auto [graph, params] = build(tiny(v), 11);
    Rng rng(3);
    Tensor batch = random_batch(3, kTinyInput, rng);
    ForwardTrace trace;
    graph.forward(params, batch, trace);
    for (double x : trace.aesthetic_logits().v) CHECK(std::isfinite(x));
    for (double x : trace.semantic_logits().v) CHECK(std::isfinite(x));
  }
}

TEST_CASE("forward rejects a shape mismatch") {
  auto [graph, params] = build(tiny(Variant::kMtcnn1), 11);
  Tensor wrong(1, 10, 10, 3);
  ForwardTrace trace;
  CHECK_THROWS_AS(graph.forward(params, wrong, trace), input_error);
}

TEST_CASE("backward: all-zero output gradients give all-zero parameter grads") {
  auto [graph, params] = build(tiny(Variant::kEnhanced), 13);
  Rng rng(4);
  Tensor batch = random_batch(2, kTinyInput, rng);
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  Tensor dz_a(2, 1, 1, 2), dz_s(2, 1, 1, 4), dz_x(2, 1, 1, 2);
  graph.backward(params, trace, dz_a, dz_s, &dz_x);
  for (const auto& t : params.tensors()) {
    for (double g : t.grad) CHECK(g == 0.0);
  }
}

TEST_CASE("backward: single dense layer gradient is the outer product") {
  ArchitectureConfig arch;
  arch.input_h = 1;
  arch.input_w = 1;
  arch.input_c = 3;
  arch.classes = 2;
  arch.attributes = 2;
  arch.trunk = {LayerSpec::flatten()};
  arch.aesthetic_head = {LayerSpec::dense(2, false)};
  arch.semantic_head = {LayerSpec::dense(2, false)};
  auto [graph, params] = build(arch, 17);

  Tensor batch(1, 1, 1, 3);
  batch.v = {1.5, -2.0, 0.5};
  ForwardTrace trace;
  graph.forward(params, batch, trace);
  Tensor da(1, 1, 1, 2), ds(1, 1, 1, 2);
  da.v = {0.25, -0.75};
  graph.backward(params, trace, da, ds, nullptr);

  const ParamTensor& wa = params.tensor(params.head_aesthetic_index());
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(wa.grad[i * 2 + j] ==
            doctest::Approx(batch.v[i] * da.v[j]).epsilon(1e-15));
    }
  }
}

TEST_CASE("backward: head gradients stay in their own groups") {
  auto [graph, params] = build(tiny(Variant::kMtcnn1), 19);
  Rng rng(5);
  Tensor batch = random_batch(2, kTinyInput, rng);
  ForwardTrace trace;
  graph.forward(params, batch, trace);

  // semantic-only gradient: W_a must stay exactly zero, and vice versa
  Tensor da(2, 1, 1, 2), ds(2, 1, 1, 4);
  for (double& x : ds.v) x = rng.normal();
  graph.backward(params, trace, da, ds, nullptr);
  for (const auto& t : params.tensors()) {
    if (t.group == ParamGroup::kHeadAesthetic) {
      for (double g : t.grad) CHECK(g == 0.0);
    }
    if (t.group == ParamGroup::kHeadSemantic) {
      double mass = 0.0;
      for (double g : t.grad) mass += std::abs(g);
      CHECK(mass > 0.0);
    }
  }

  for (double& x : da.v) x = rng.normal();
  std::fill(ds.v.begin(), ds.v.end(), 0.0);
  graph.backward(params, trace, da, ds, nullptr);
  for (const auto& t : params.tensors()) {
    if (t.group == ParamGroup::kHeadSemantic) {
      for (double g : t.grad) CHECK(g == 0.0);
    }
  }
}

TEST_CASE("mtcnn3: branch layers are isolated from the other task") {
  auto [graph, params] = build(tiny(Variant::kMtcnn3), 23);
  Rng rng(6);
  Tensor batch = random_batch(2, kTinyInput, rng);
  ForwardTrace trace;
  graph.forward(params, batch, trace);

  // aesthetic-only gradient: every semantic-branch parameter beyond the
  // shared convolutions is exactly zero, trunk is not
  Tensor da(2, 1, 1, 2), ds(2, 1, 1, 4);
  for (double& x : da.v) x = rng.normal();
  graph.backward(params, trace, da, ds, nullptr);
  double trunk_mass = 0.0;
  for (const auto& t : params.tensors()) {
    if (t.group == ParamGroup::kHeadSemantic) {
      for (double g : t.grad) CHECK(g == 0.0);
    }
    if (t.group == ParamGroup::kTrunk) {
      for (double g : t.grad) trunk_mass += std::abs(g);
    }
  }
  CHECK(trunk_mass > 0.0);
}

TEST_CASE("gradient check: every variant, relationship on and off") {
  Rng rng(7);
  Tensor batch = random_batch(2, kTinyInput, rng);
  BatchLabels labels = random_labels(2, 2, 4, rng);
  for (Variant v : {Variant::kMtcnn1, Variant::kMtcnn2, Variant::kMtcnn3,
                    Variant::kEnhanced}) {
    for (bool rel : {false, true}) {
      LossSettings settings;
      settings.lambda = v == Variant::kEnhanced ? 0.5 : 0.25;
      settings.mu = 0.25;
      settings.relationship = rel;
      GradCheckReport r = gradient_check(tiny(v), settings, batch, labels, 31);
      INFO(variant_name(v), " rel=", rel, " worst=", r.worst_param);
      CHECK(r.max_rel_error < 1e-4);
      CHECK(r.checked > 500);
    }
  }
}

TEST_CASE("layer spec round trips through its string form") {
  for (const LayerSpec& s :
       {LayerSpec::conv(5, 16, 2), LayerSpec::pool(2), LayerSpec::dense(64),
        LayerSpec::dense(2, false), LayerSpec::relu(), LayerSpec::flatten()}) {
    LayerSpec back = LayerSpec::from_string(s.to_string());
    CHECK(back.to_string() == s.to_string());
  }
  ArchitectureConfig arch = tiny(Variant::kEnhanced);
  ArchitectureConfig back = ArchitectureConfig::deserialize(arch.serialize());
  CHECK(back.serialize() == arch.serialize());
}
