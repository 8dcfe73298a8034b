#include "mtaesth/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "mtaesth/checkpoint.hpp"
#include "mtaesth/errors.hpp"
#include "mtaesth/evaluate.hpp"
#include "mtaesth/training.hpp"

namespace mtaesth::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write '" + path + "'");
  out << content;
}

/// Full key schema of a training run config.
const std::set<std::string> kTrainKeys = {
    "manifest",       "out_dir",        "variant",
    "input_height",   "input_width",    "input_channels",
    "classes",        "conv_channels",  "conv_filters",
    "dense_units",    "lambda_mode",    "mu",
    "patience",       "relationship",   "relationship_include_aux",
    "gamma_theta",    "gamma_w",        "gamma_omega",
    "lr",             "lr_decay",       "lr_decay_epochs",
    "momentum",       "batch",          "epochs",
    "omega_interval", "seed",           "delta",
    "finetune_from",  "mask_semantic"};

struct RunSettings {
  TrainConfig train;
  std::string manifest_path;
  std::string out_dir;
  std::string finetune_from;
  double delta = 0.0;
  bool delta_overridden = false;
  std::string lambda_mode;
};

BalancePolicy make_policy(const std::string& mode, std::size_t attributes,
                          Variant variant, std::size_t patience) {
  const double m = static_cast<double>(attributes);
  if (mode == "strategy") return BalancePolicy::strategy(attributes, variant);
  if (mode == "zero") return BalancePolicy::none(attributes);
  if (mode == "one") return BalancePolicy::equal(attributes);
  if (mode == "one-over-m") return BalancePolicy::fixed(1.0 / m, 1.0 / m);
  if (mode == "two-over-m") return BalancePolicy::fixed(2.0 / m, 1.0 / m);
  if (mode == "early-stop") {
    return BalancePolicy::early_stop(attributes, patience);
  }
  throw config_error("unknown lambda_mode '" + mode +
                     "' (strategy|zero|one-over-m|two-over-m|one|early-stop)");
}

RunSettings parse_run_settings(const std::string& config_path,
                               const Overrides& overrides,
                               std::size_t attributes) {
  KvFile kv = config_path.empty() ? KvFile()
                                  : KvFile::load(config_path);
  for (const auto& [k, v] : overrides) kv.set(k, v);
  kv.require_known_keys(kTrainKeys);

  RunSettings s;
  s.manifest_path = kv.get_or("manifest", "");
  s.out_dir = kv.get_or("out_dir", ".");
  s.finetune_from = kv.get_or("finetune_from", "");
  s.delta = kv.get_double_or("delta", 0.0);
  s.delta_overridden = kv.has("delta");

  const Variant variant = variant_from_name(kv.get_or("variant", "mtcnn1"));
  ArchitectureScale scale;
  if (kv.has("conv_channels")) {
    for (long v : kv.get_ints("conv_channels")) {
      if (v <= 0) throw config_error("conv_channels must be positive");
    }
    scale.conv_channels.clear();
    for (long v : kv.get_ints("conv_channels")) {
      scale.conv_channels.push_back(static_cast<std::size_t>(v));
    }
  }
  if (kv.has("conv_filters")) {
    scale.conv_filters.clear();
    for (long v : kv.get_ints("conv_filters")) {
      scale.conv_filters.push_back(static_cast<std::size_t>(v));
    }
  }
  if (kv.has("dense_units")) {
    scale.dense_units.clear();
    for (long v : kv.get_ints("dense_units")) {
      scale.dense_units.push_back(static_cast<std::size_t>(v));
    }
  }

  s.train.arch = default_architecture(
      variant, static_cast<std::size_t>(kv.get_int_or("input_height", 32)),
      static_cast<std::size_t>(kv.get_int_or("input_width", 32)),
      static_cast<std::size_t>(kv.get_int_or("input_channels", 3)),
      static_cast<std::size_t>(kv.get_int_or("classes", 2)), attributes,
      scale);

  s.lambda_mode = kv.get_or("lambda_mode", "strategy");
  const std::size_t patience =
      static_cast<std::size_t>(kv.get_int_or("patience", 3));
  s.train.policy = make_policy(s.lambda_mode, attributes, variant, patience);
  if (kv.has("mu")) s.train.policy.mu = kv.get_double("mu");

  s.train.relationship = kv.get_bool_or("relationship", false);
  s.train.relationship_include_aux =
      kv.get_bool_or("relationship_include_aux", false);
  s.train.gamma_theta = kv.get_double_or("gamma_theta", 1e-4);
  s.train.gamma_w = kv.get_double_or("gamma_w", 1e-4);
  s.train.gamma_omega = kv.get_double_or("gamma_omega", 1e-3);
  s.train.learning_rate = kv.get_double_or("lr", 0.02);
  s.train.lr_decay = kv.get_double_or("lr_decay", 0.1);
  s.train.lr_decay_epochs =
      static_cast<std::size_t>(kv.get_int_or("lr_decay_epochs", 8));
  s.train.momentum = kv.get_double_or("momentum", 0.9);
  s.train.batch = static_cast<std::size_t>(kv.get_int_or("batch", 32));
  s.train.epochs = static_cast<std::size_t>(kv.get_int_or("epochs", 10));
  s.train.omega_interval_epochs =
      static_cast<std::size_t>(kv.get_int_or("omega_interval", 1));
  s.train.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", 1));
  s.train.mask_semantic = kv.get_bool_or("mask_semantic", false);
  return s;
}

std::size_t peek_attributes(const std::string& config_path,
                            const Overrides& overrides) {
  KvFile kv =
      config_path.empty() ? KvFile() : KvFile::load(config_path);
  for (const auto& [k, v] : overrides) kv.set(k, v);
  const std::string manifest = kv.get_or("manifest", "");
  if (manifest.empty()) {
    throw config_error("a training run needs a manifest= key or --manifest");
  }
  return DatasetManifest::load(manifest).attributes;
}

int exit_for(const error& e) {
  if (dynamic_cast<const train_error*>(&e)) return kExitTrainAbort;
  return kExitConfig;
}

}  // namespace

int cmd_gen(const std::string& spec_path, const std::string& out_dir) {
  try {
    GenSpec spec = GenSpec::from_kv(KvFile::load(spec_path));
    SyntheticData gen = generate_synthetic(spec);
    persist_dataset(gen.dataset, out_dir, gen.plan);

    std::size_t high = 0;
    for (const auto& rec : gen.dataset.records) {
      if (delta_label(rec.mean_score, gen.dataset.midpoint, 0.0) ==
          AestheticLabel::kHigh) {
        ++high;
      }
    }
    std::printf("generated %zu records, %zu attributes -> %s\n",
                gen.dataset.records.size(), gen.dataset.attributes,
                out_dir.c_str());
    std::printf("class balance at delta=0: %.3f high / %.3f low\n",
                static_cast<double>(high) / gen.dataset.records.size(),
                1.0 - static_cast<double>(high) / gen.dataset.records.size());
    return kExitOk;
  } catch (const error& e) {
    std::fprintf(stderr, "gen: %s\n", e.what());
    return kExitConfig;
  }
}

int cmd_train(const std::string& config_path, const Overrides& overrides) {
  try {
    const std::size_t attributes = peek_attributes(config_path, overrides);
    RunSettings s = parse_run_settings(config_path, overrides, attributes);

    DatasetManifest manifest = DatasetManifest::load(s.manifest_path);
    Dataset data = ingest(manifest, fs::path(s.manifest_path).parent_path());
    const double delta = s.delta_overridden ? s.delta : manifest.delta;
    Split split = make_split(data, delta, manifest.split_seed,
                             manifest.train_fraction, manifest.test_fraction);

    TrainResult result;
    if (!s.finetune_from.empty()) {
      result = finetune(s.finetune_from, s.train, data, split.train);
    } else {
      result = train(s.train, data, split.train);
    }

    fs::create_directories(s.out_dir);
    const fs::path out(s.out_dir);
    save_checkpoint((out / "checkpoint.bin").string(), s.train.arch,
                    result.report.channel_means, result.params);
    write_file((out / "report.csv").string(), result.report.report_csv());
    if (result.report.final_omega) {
      write_file((out / "omega.csv").string(),
                 TrainReport::omega_csv(*result.report.final_omega,
                                        s.train.arch.classes,
                                        data.attribute_names));
    }

    EvalMetrics test = evaluate(result.graph, result.params, data, split.test,
                                result.report.channel_means);
    std::printf("trained %zu epochs on %zu records (lambda_mode=%s)\n",
                s.train.epochs, split.train.size(), s.lambda_mode.c_str());
    std::printf("test aesthetic accuracy: %.4f  mean AP: %.4f\n",
                test.accuracy, test.mean_ap);
    std::printf("artifacts in %s\n", s.out_dir.c_str());
    return kExitOk;
  } catch (const error& e) {
    std::fprintf(stderr, "train: %s\n", e.what());
    return exit_for(e);
  }
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest,
             const std::string& split_name) {
  Checkpoint ckpt;
  try {
    ckpt = load_checkpoint(checkpoint_path);
  } catch (const error& e) {
    std::fprintf(stderr, "eval: %s\n", e.what());
    return kExitEvalIncompatible;
  }
  try {
    DatasetManifest m = DatasetManifest::load(manifest);
    Dataset data = ingest(m, fs::path(manifest).parent_path());
    Split split = make_split(data, m.delta, m.split_seed, m.train_fraction,
                             m.test_fraction);
    const std::vector<LabeledIndex>& side =
        split_name == "train" ? split.train : split.test;
    if (split_name != "train" && split_name != "test") {
      throw config_error("split must be 'train' or 'test'");
    }

    auto [graph, params] = restore_graph(ckpt);
    EvalMetrics metrics;
    try {
      metrics = evaluate(graph, params, data, side, ckpt.channel_means);
    } catch (const input_error& e) {
      std::fprintf(stderr, "eval: %s\n", e.what());
      return kExitEvalIncompatible;
    }

    ordered_json j;
    j["split"] = split_name;
    j["samples"] = metrics.samples;
    j["aesthetic_accuracy"] = metrics.accuracy;
    ordered_json per_acc = ordered_json::object();
    ordered_json per_ap = ordered_json::object();
    for (std::size_t a = 0; a < data.attributes; ++a) {
      per_acc[data.attribute_names[a]] = metrics.per_attr_accuracy[a];
      per_ap[data.attribute_names[a]] = metrics.per_attr_ap[a];
    }
    j["per_attribute_accuracy"] = per_acc;
    j["per_attribute_ap"] = per_ap;
    j["mean_ap"] = metrics.mean_ap;
    std::printf("%s\n", j.dump(2).c_str());
    return kExitOk;
  } catch (const checkpoint_error& e) {
    std::fprintf(stderr, "eval: %s\n", e.what());
    return kExitEvalIncompatible;
  } catch (const error& e) {
    std::fprintf(stderr, "eval: %s\n", e.what());
    return kExitConfig;
  }
}

namespace {

/// Parses a square omega CSV with a subtask-name header row.
std::pair<SymMatrix, std::vector<std::string>> parse_omega_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw data_error(path + ": empty file");
  std::vector<std::string> names = split_csv_list(line);
  const std::size_t n = names.size();
  if (n == 0) throw data_error(path + ": empty header");
  std::vector<double> entries;
  entries.reserve(n * n);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_list(line);
    if (cells.size() != n) {
      throw data_error(path + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(n) + " cells");
    }
    for (const std::string& c : cells) {
      char* end = nullptr;
      const double x = std::strtod(c.c_str(), &end);
      if (end == c.c_str() || *end != '\0') {
        throw data_error(path + ":" + std::to_string(lineno) +
                         ": bad number '" + c + "'");
      }
      entries.push_back(x);
    }
  }
  if (entries.size() != n * n) {
    throw data_error(path + ": expected " + std::to_string(n) + "x" +
                     std::to_string(n) + " matrix");
  }
  return {SymMatrix::from_entries(n, std::move(entries)), std::move(names)};
}

}  // namespace

int cmd_analyze(const std::string& omega_csv_path, const std::string& out_path,
                std::size_t top_k) {
  try {
    auto [omega, names] = parse_omega_csv(omega_csv_path);
    if (std::abs(omega.trace() - 1.0) > 1e-6) {
      throw data_error("omega trace is " + std::to_string(omega.trace()) +
                       ", expected 1 within 1e-6");
    }
    SymMatrix corr = covariance_to_correlation(omega);

    std::string out_file = out_path;
    if (out_file.empty()) {
      out_file = (fs::path(omega_csv_path).parent_path() / "correlation.csv")
                     .string();
    }
    std::ostringstream csv;
    for (std::size_t i = 0; i < names.size(); ++i) {
      csv << (i ? "," : "") << names[i];
    }
    csv << "\n";
    char buf[48];
    for (std::size_t i = 0; i < corr.order(); ++i) {
      for (std::size_t j = 0; j < corr.order(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", corr.at(i, j));
        csv << (j ? "," : "") << buf;
      }
      csv << "\n";
    }
    write_file(out_file, csv.str());

    // rank (semantic subtask, aesthetic subtask) pairs
    std::vector<std::size_t> aes_cols, sem_cols;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i].rfind("aesthetic", 0) == 0) {
        aes_cols.push_back(i);
      } else {
        sem_cols.push_back(i);
      }
    }
    struct Pair {
      double r;
      std::size_t sem, aes;
    };
    std::vector<Pair> pairs;
    for (std::size_t s : sem_cols) {
      for (std::size_t a : aes_cols) pairs.push_back({corr.at(s, a), s, a});
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const Pair& x, const Pair& y) { return x.r > y.r; });
    std::printf("correlation matrix -> %s\n", out_file.c_str());
    std::printf("top %zu positive (subtask, aesthetic subtask) pairs:\n",
                top_k);
    for (std::size_t i = 0; i < std::min(top_k, pairs.size()); ++i) {
      std::printf("  %-20s %-16s %+.4f\n", names[pairs[i].sem].c_str(),
                  names[pairs[i].aes].c_str(), pairs[i].r);
    }
    std::printf("top %zu negative pairs:\n", top_k);
    for (std::size_t i = 0; i < std::min(top_k, pairs.size()); ++i) {
      const Pair& p = pairs[pairs.size() - 1 - i];
      std::printf("  %-20s %-16s %+.4f\n", names[p.sem].c_str(),
                  names[p.aes].c_str(), p.r);
    }
    return kExitOk;
  } catch (const error& e) {
    std::fprintf(stderr, "analyze: %s\n", e.what());
    return kExitConfig;
  }
}

int cmd_gradcheck(const std::string& config_path, bool inject_fault) {
  try {
    KvFile kv = config_path.empty() ? KvFile() : KvFile::load(config_path);
    kv.require_known_keys({"input_height", "input_width", "input_channels",
                           "classes", "m", "conv_channels", "conv_filters",
                           "dense_units", "gamma_theta", "gamma_w",
                           "gamma_omega", "seed"});
    const std::size_t h =
        static_cast<std::size_t>(kv.get_int_or("input_height", 32));
    const std::size_t w =
        static_cast<std::size_t>(kv.get_int_or("input_width", 32));
    const std::size_t c =
        static_cast<std::size_t>(kv.get_int_or("input_channels", 3));
    const std::size_t classes =
        static_cast<std::size_t>(kv.get_int_or("classes", 2));
    const std::size_t m = static_cast<std::size_t>(kv.get_int_or("m", 8));
    const std::uint64_t seed =
        static_cast<std::uint64_t>(kv.get_int_or("seed", 7));
    ArchitectureScale scale;
    if (kv.has("conv_channels")) {
      scale.conv_channels.clear();
      for (long v : kv.get_ints("conv_channels")) {
        scale.conv_channels.push_back(static_cast<std::size_t>(v));
      }
    }
    if (kv.has("conv_filters")) {
      scale.conv_filters.clear();
      for (long v : kv.get_ints("conv_filters")) {
        scale.conv_filters.push_back(static_cast<std::size_t>(v));
      }
    }
    if (kv.has("dense_units")) {
      scale.dense_units.clear();
      for (long v : kv.get_ints("dense_units")) {
        scale.dense_units.push_back(static_cast<std::size_t>(v));
      }
    }

    // deterministic 2-sample batch
    Rng rng(derive_seed(seed, "gradcheck/batch"));
    Tensor batch(2, h, w, c);
    for (double& x : batch.v) x = rng.uniform() - 0.5;
    BatchLabels labels;
    labels.attributes = m;
    labels.y = {rng.below(classes), rng.below(classes)};
    labels.z.resize(2 * m);
    for (auto& z : labels.z) z = rng.bernoulli(0.5) ? 1 : 0;

    const auto t0 = std::chrono::steady_clock::now();
    bool all_ok = true;
    std::string worst_param;
    double worst_err = 0.0;
    for (Variant variant : {Variant::kMtcnn1, Variant::kMtcnn2,
                            Variant::kMtcnn3, Variant::kEnhanced}) {
      for (bool relationship : {false, true}) {
        ArchitectureConfig arch =
            default_architecture(variant, h, w, c, classes, m, scale);
        LossSettings settings;
        settings.lambda = (variant == Variant::kEnhanced ? 2.0 : 1.0) /
                          static_cast<double>(m);
        settings.mu = 1.0 / static_cast<double>(m);
        settings.gamma_theta = kv.get_double_or("gamma_theta", 1e-4);
        settings.gamma_w = kv.get_double_or("gamma_w", 1e-4);
        settings.gamma_omega = kv.get_double_or("gamma_omega", 1e-3);
        settings.relationship = relationship;

        GradCheckReport report;
        if (inject_fault) {
          auto [graph, params] = build(arch, seed);
          TaskCovariance omega = TaskCovariance::uniform(classes + m);
          ForwardTrace trace;
          graph.forward(params, batch, trace);
          TotalLoss loss =
              total_loss(trace, labels, params,
                         relationship ? &omega : nullptr, settings);
          graph.backward(params, trace, loss.d_aesthetic, loss.d_semantic,
                         trace.has_aux() ? &loss.d_aux : nullptr);
          add_l2_gradients(params, settings.gamma_theta, settings.gamma_w);
          if (relationship) {
            Matrix wm = params.task_matrix(false);
            RelationshipTerm rel = relationship_term(wm, omega);
            for (double& x : rel.grad.v) x *= settings.gamma_omega;
            params.add_task_matrix_grad(rel.grad, false);
          }
          std::vector<std::vector<double>> analytic;
          for (const auto& t : params.tensors()) analytic.push_back(t.grad);
          analytic[0][0] += 0.05;  // the injected fault
          report = gradient_check_against(graph, params, analytic, batch,
                                          labels, relationship ? &omega : nullptr,
                                          settings);
        } else {
          report = gradient_check(arch, settings, batch, labels, seed);
        }

        const bool ok = report.max_rel_error < 1e-4;
        all_ok &= ok;
        if (report.max_rel_error > worst_err) {
          worst_err = report.max_rel_error;
          worst_param = variant_name(variant) + "/" +
                        (relationship ? "rel" : "norel") + ": " +
                        report.worst_param;
        }
        std::printf(
            "variant=%-8s relationship=%-3s params=%-6zu max_rel_err=%.3e "
            "worst=%s %s\n",
            variant_name(variant).c_str(), relationship ? "on" : "off",
            report.checked, report.max_rel_error, report.worst_param.c_str(),
            ok ? "PASS" : "FAIL");
      }
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::printf("gradient check matrix finished in %.1f s: %s\n", secs,
                all_ok ? "PASS" : "FAIL");
    if (!all_ok) {
      std::fprintf(stderr, "gradcheck: worst offender %s (%.3e)\n",
                   worst_param.c_str(), worst_err);
      return kExitGradCheckFailed;
    }
    return kExitOk;
  } catch (const error& e) {
    std::fprintf(stderr, "gradcheck: %s\n", e.what());
    return kExitConfig;
  }
}

}  // namespace mtaesth::cli
