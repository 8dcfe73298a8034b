#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mtaesth/checkpoint.hpp"
#include "mtaesth/commands.hpp"
#include "mtaesth/errors.hpp"
#include "mtaesth/evaluate.hpp"
#include "mtaesth/training.hpp"

namespace py = pybind11;
using namespace mtaesth;

namespace {

SymMatrix sym_from_array(py::array_t<double, py::array::c_style |
                                                 py::array::forcecast> a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) {
    throw input_error("expected a square 2-D array");
  }
  const std::size_t n = static_cast<std::size_t>(a.shape(0));
  std::vector<double> entries(a.data(), a.data() + n * n);
  return SymMatrix::from_entries(n, std::move(entries));
}

py::array_t<double> sym_to_array(const SymMatrix& m) {
  py::array_t<double> out({m.order(), m.order()});
  std::copy(m.entries().begin(), m.entries().end(), out.mutable_data());
  return out;
}

Matrix mat_from_array(py::array_t<double, py::array::c_style |
                                              py::array::forcecast> a) {
  if (a.ndim() != 2) throw input_error("expected a 2-D array");
  Matrix m(static_cast<std::size_t>(a.shape(0)),
           static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + m.rows * m.cols, m.v.begin());
  return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Multi-task aesthetic quality assessment: symmetric matrix kernels, "
      "the closed-form task-covariance update, and the data/train/eval "
      "pipeline behind the mtaesth CLI.";

  py::register_exception<error>(m, "MtaesthError");

  // linalg
  m.def(
      "sym_eigendecompose",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a) {
        EigenDecomposition d = sym_eigendecompose(sym_from_array(a));
        py::array_t<double> values(d.values.size());
        std::copy(d.values.begin(), d.values.end(), values.mutable_data());
        py::array_t<double> vectors({d.vectors.rows, d.vectors.cols});
        std::copy(d.vectors.v.begin(), d.vectors.v.end(),
                  vectors.mutable_data());
        return py::make_tuple(values, vectors);
      },
      py::arg("matrix"),
      "Eigenvalues (descending) and orthonormal eigenvector columns of a "
      "symmetric matrix.");
  m.def(
      "psd_sqrt",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         double jitter) { return sym_to_array(psd_sqrt(sym_from_array(a), jitter)); },
      py::arg("matrix"), py::arg("jitter") = kDefaultJitter,
      "Symmetric PSD square root; small negative eigenvalues are clamped.");
  m.def(
      "sym_inverse",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         double ridge) { return sym_to_array(sym_inverse(sym_from_array(a), ridge)); },
      py::arg("matrix"), py::arg("ridge") = 0.0,
      "Inverse of (matrix + ridge * I).");
  m.def(
      "covariance_to_correlation",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a) {
        return sym_to_array(covariance_to_correlation(sym_from_array(a)));
      },
      py::arg("omega"));

  // covariance update
  m.def(
      "update_omega",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> w,
         double ridge) {
        return sym_to_array(update_omega(mat_from_array(w), ridge).omega);
      },
      py::arg("task_matrix"), py::arg("ridge") = -1.0,
      "Unit-trace PSD covariance (WtW)^(1/2) / tr((WtW)^(1/2)); ridge < 0 "
      "selects the default 1e-8 * tr(WtW).");

  // labeling
  m.def(
      "delta_label",
      [](double mean_score, double midpoint, double delta) -> std::string {
        switch (mtaesth::delta_label(mean_score, midpoint, delta)) {
          case AestheticLabel::kHigh:
            return "high";
          case AestheticLabel::kLow:
            return "low";
          default:
            return "discard";
        }
      },
      py::arg("mean_score"), py::arg("midpoint") = 5.0, py::arg("delta") = 0.0,
      "Threshold labeling: high above midpoint+delta, low below "
      "midpoint-delta, discard otherwise.");

  // pipeline wrappers (same entry points the CLI uses)
  m.def(
      "run_gen",
      [](const std::string& spec, const std::string& out) {
        const int rc = cli::cmd_gen(spec, out);
        if (rc != 0) throw error("gen failed with exit code " + std::to_string(rc));
      },
      py::arg("spec_path"), py::arg("out_dir"));
  m.def(
      "run_train",
      [](const std::string& config,
         const std::map<std::string, std::string>& overrides) {
        const int rc = cli::cmd_train(config, overrides);
        if (rc != 0)
          throw error("train failed with exit code " + std::to_string(rc));
      },
      py::arg("config_path"),
      py::arg("overrides") = std::map<std::string, std::string>{});
  m.def(
      "run_eval",
      [](const std::string& checkpoint, const std::string& manifest,
         const std::string& split) {
        Checkpoint ckpt = load_checkpoint(checkpoint);
        DatasetManifest mf = DatasetManifest::load(manifest);
        Dataset data = ingest(
            mf, std::filesystem::path(manifest).parent_path().string());
        Split sp = make_split(data, mf.delta, mf.split_seed, mf.train_fraction,
                              mf.test_fraction);
        auto [graph, params] = restore_graph(ckpt);
        EvalMetrics metrics =
            evaluate(graph, params, data,
                     split == "train" ? sp.train : sp.test,
                     ckpt.channel_means);
        py::dict out;
        out["samples"] = metrics.samples;
        out["aesthetic_accuracy"] = metrics.accuracy;
        out["per_attribute_accuracy"] = metrics.per_attr_accuracy;
        out["per_attribute_ap"] = metrics.per_attr_ap;
        out["mean_ap"] = metrics.mean_ap;
        return out;
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("split") = "test");
  m.def(
      "gradient_check",
      [](std::size_t input, std::size_t classes, std::size_t attributes,
         const std::string& variant, bool relationship, std::uint64_t seed,
         std::vector<std::size_t> conv_channels,
         std::vector<std::size_t> conv_filters,
         std::vector<std::size_t> dense_units) {
        ArchitectureScale scale;
        if (!conv_channels.empty()) scale.conv_channels = conv_channels;
        if (!conv_filters.empty()) scale.conv_filters = conv_filters;
        if (!dense_units.empty()) scale.dense_units = dense_units;
        ArchitectureConfig arch =
            default_architecture(variant_from_name(variant), input, input, 3,
                                 classes, attributes, scale);
        Rng rng(derive_seed(seed, "gradcheck/batch"));
        Tensor batch(2, input, input, 3);
        for (double& x : batch.v) x = rng.uniform() - 0.5;
        BatchLabels labels;
        labels.attributes = attributes;
        labels.y = {rng.below(classes), rng.below(classes)};
        labels.z.resize(2 * attributes);
        for (auto& z : labels.z) z = rng.bernoulli(0.5) ? 1 : 0;
        LossSettings settings;
        settings.lambda = 1.0 / static_cast<double>(attributes);
        settings.mu = settings.lambda;
        settings.relationship = relationship;
        GradCheckReport r =
            gradient_check(arch, settings, batch, labels, seed);
        py::dict out;
        out["max_rel_error"] = r.max_rel_error;
        out["worst_param"] = r.worst_param;
        out["checked"] = r.checked;
        return out;
      },
      py::arg("input") = 16, py::arg("classes") = 2, py::arg("attributes") = 4,
      py::arg("variant") = "mtcnn1", py::arg("relationship") = false,
      py::arg("seed") = 7,
      py::arg("conv_channels") = std::vector<std::size_t>{},
      py::arg("conv_filters") = std::vector<std::size_t>{},
      py::arg("dense_units") = std::vector<std::size_t>{});

  m.attr("__version__") = "0.1.0";
}
