#include "mtaesth/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtaesth/errors.hpp"

namespace mtaesth {

double average_precision(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& positives) {
  if (scores.size() != positives.size()) {
    throw input_error("average_precision: size mismatch");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (positives[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

EvalMetrics evaluate(const LayerGraph& graph, const ParamStore& params,
                     const Dataset& data,
                     const std::vector<LabeledIndex>& records,
                     const std::array<double, 3>& means,
                     std::size_t batch_size) {
  const auto& cfg = graph.config();
  if (cfg.attributes != data.attributes) {
    throw input_error("network expects " + std::to_string(cfg.attributes) +
                      " attributes, dataset has " +
                      std::to_string(data.attributes));
  }
  EvalMetrics out;
  out.samples = records.size();
  out.per_attr_accuracy.assign(data.attributes, 0.0);
  out.per_attr_count.assign(data.attributes, 0);

  const std::size_t m = data.attributes;
  std::vector<std::vector<double>> attr_scores(m);
  std::vector<std::vector<std::uint8_t>> attr_pos(m);

  ForwardTrace trace;
  std::size_t correct = 0;
  std::vector<double> per_attr_correct(m, 0.0);

  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, records.size() - start);
    Tensor batch(b, cfg.input_h, cfg.input_w, cfg.input_c);
    for (std::size_t i = 0; i < b; ++i) {
      center_crop(data, data.records[records[start + i].first], cfg.input_h,
                  cfg.input_w, means, batch.sample(i));
    }
    graph.forward(params, batch, trace);
    const Tensor& la = trace.aesthetic_logits();
    const Tensor& ls = trace.semantic_logits();
    for (std::size_t i = 0; i < b; ++i) {
      const auto& [rec, y] = records[start + i];
      const double* lg = la.sample(i);
      std::size_t pred = 0;
      for (std::size_t c = 1; c < la.c; ++c) {
        if (lg[c] > lg[pred]) pred = c;
      }
      const bool ok = pred == y;
      correct += ok ? 1 : 0;
      const auto& z = data.records[rec].semantic;
      for (std::size_t a = 0; a < m; ++a) {
        if (z[a]) {
          out.per_attr_count[a]++;
          per_attr_correct[a] += ok ? 1.0 : 0.0;
        }
        attr_scores[a].push_back(1.0 / (1.0 + std::exp(-ls.sample(i)[a])));
        attr_pos[a].push_back(z[a]);
      }
    }
  }

  out.accuracy = records.empty()
                     ? 0.0
                     : static_cast<double>(correct) /
                           static_cast<double>(records.size());
  out.per_attr_ap.resize(m);
  double ap_sum = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    out.per_attr_accuracy[a] =
        out.per_attr_count[a] == 0
            ? 0.0
            : per_attr_correct[a] / static_cast<double>(out.per_attr_count[a]);
    out.per_attr_ap[a] = average_precision(attr_scores[a], attr_pos[a]);
    ap_sum += out.per_attr_ap[a];
  }
  out.mean_ap = m == 0 ? 0.0 : ap_sum / static_cast<double>(m);
  return out;
}

}  // namespace mtaesth
