#pragma once

#include <array>
#include <vector>

#include "mtaesth/data.hpp"
#include "mtaesth/network.hpp"

namespace mtaesth {

struct EvalMetrics {
  double accuracy = 0.0;                   ///< overall aesthetic accuracy
  std::vector<double> per_attr_accuracy;   ///< accuracy among samples with tag
  std::vector<std::size_t> per_attr_count;
  std::vector<double> per_attr_ap;         ///< semantic average precision
  double mean_ap = 0.0;
  std::size_t samples = 0;
};

/// Deterministic evaluation: center crop, no flip.
EvalMetrics evaluate(const LayerGraph& graph, const ParamStore& params,
                     const Dataset& data,
                     const std::vector<LabeledIndex>& records,
                     const std::array<double, 3>& means,
                     std::size_t batch_size = 64);

/// Ranked average precision: mean of precision-at-hit over the positives,
/// scores sorted descending with stable index order.
double average_precision(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& positives);

}  // namespace mtaesth
