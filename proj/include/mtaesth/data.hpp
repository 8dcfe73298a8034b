#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtaesth/kvfile.hpp"
#include "mtaesth/rng.hpp"
#include "mtaesth/tensor.hpp"

namespace mtaesth {

// ---------------------------------------------------------------------------
// Records and datasets
// ---------------------------------------------------------------------------

/// One source image with its mean rating and multi-hot semantic tags.
/// Pixels are 8-bit RGB; [0,1] values are materialized at crop time.
struct RawRecord {
  std::vector<std::uint8_t> pixels;  ///< h*w*3, row-major RGB
  double mean_score = 0.0;
  std::vector<std::uint8_t> semantic;
};

struct Dataset {
  std::size_t height = 0, width = 0;
  std::size_t attributes = 0;
  double scale_min = 1.0, scale_max = 10.0, midpoint = 5.0;
  bool full_coverage = true;  ///< every record carries at least one tag
  std::vector<std::string> attribute_names;
  std::vector<RawRecord> records;
};

enum class AestheticLabel { kHigh, kLow, kDiscard };

/// The delta-threshold rule: high above midpoint+delta, low below
/// midpoint-delta, discarded in between (boundary equality discards).
AestheticLabel delta_label(double mean_score, double midpoint, double delta);

/// (record index, class) pairs; class 0 = low, 1 = high.
using LabeledIndex = std::pair<std::size_t, std::size_t>;

struct Split {
  std::vector<LabeledIndex> train;
  std::vector<LabeledIndex> test;
};

/// Random disjoint split. Training labels use `delta_train`; test labels
/// always use delta = 0. Deterministic in the seed.
Split make_split(const Dataset& data, double delta_train,
                 std::uint64_t split_seed, double train_fraction,
                 double test_fraction);

// ---------------------------------------------------------------------------
// Cropping / augmentation
// ---------------------------------------------------------------------------

/// Extracts a crop as doubles in [0,1] minus per-channel means, writing
/// crop_h*crop_w*3 values to `out`.
void crop_patch(const Dataset& data, const RawRecord& rec, std::size_t y0,
                std::size_t x0, std::size_t crop_h, std::size_t crop_w,
                bool hflip, const std::array<double, 3>& channel_means,
                double* out);

/// Training augmentation: uniformly random offset, horizontal flip with
/// probability 1/2.
void augment(const Dataset& data, const RawRecord& rec, Rng& rng,
             std::size_t crop_h, std::size_t crop_w,
             const std::array<double, 3>& channel_means, double* out);

/// Evaluation crop: deterministic center, no flip.
void center_crop(const Dataset& data, const RawRecord& rec, std::size_t crop_h,
                 std::size_t crop_w, const std::array<double, 3>& channel_means,
                 double* out);

void flip_horizontal(std::size_t h, std::size_t w, std::size_t c, double* buf);

/// Per-channel pixel means (of values in [0,1]) over the given records.
std::array<double, 3> channel_means(const Dataset& data,
                                    const std::vector<LabeledIndex>& records);

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Plan semantics: plan[m] is the probability that a record carrying
/// attribute m is high quality, P(high | z_m = 1).
struct GenSpec {
  std::size_t n = 5000;
  std::size_t m = 8;
  std::size_t height = 40, width = 40;
  std::vector<double> plan;
  double noise = 0.15;
  double cue_strength = 0.25;     ///< class cue contrast in the background
  double code_strength = 1.0;     ///< attribute cell contrast over the background
  double secondary_prob = 0.15;   ///< chance of a second content tag per record
  /// Optional interaction channel: these two attributes toggle independently
  /// with probability 1/2 and, with probability xor_weight, the class is
  /// drawn from their exclusive-or (their own conditionals stay at 1/2, so
  /// neither carries a first-order class signal).
  long xor_a = -1, xor_b = -1;
  double xor_high = 0.92;    ///< P(high | exactly one of the pair active)
  double xor_weight = 0.0;   ///< probability mass of the interaction channel
  double scale_min = 1.0, scale_max = 10.0, midpoint = 5.0;
  std::uint64_t seed = 1;

  static GenSpec from_kv(const KvFile& kv);
  KvFile to_kv() const;
};

struct SyntheticData {
  Dataset dataset;
  std::vector<double> plan;            ///< echo of the requested conditionals
  std::vector<double> primary_prob;    ///< solved P(high | primary tag = m)
  std::vector<std::size_t> primary;    ///< per-record primary content attribute
};

/// Renders N records whose pixels encode the active attributes (distinct
/// colored/striped cells in the crop-safe center region) plus a weaker
/// class-dependent background contrast cue. mean_score is drawn so that
/// P(high | attribute m) matches the plan. Throws config_error when the
/// plan is infeasible.
SyntheticData generate_synthetic(const GenSpec& spec);

/// The exact pixel pattern the generator uses for one attribute cell, and
/// where that cell sits. Test oracles match against these.
struct CellRect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};
CellRect attribute_cell(const GenSpec& spec, std::size_t attr);
std::vector<std::uint8_t> attribute_template(const GenSpec& spec,
                                             std::size_t attr);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::string container;  ///< path, relative to the manifest file
  std::string labels;
  std::size_t attributes = 0;
  double midpoint = 5.0;
  double scale_min = 1.0, scale_max = 10.0;
  double delta = 0.0;
  std::uint64_t split_seed = 1;
  double train_fraction = 0.8;
  double test_fraction = 0.2;
  bool full_coverage = true;
  std::vector<double> plan;  ///< optional generator echo, empty when unknown

  static DatasetManifest load(const std::string& path);
  void save(const std::string& path) const;
};

/// Writes container + labels + manifest into `dir`.
DatasetManifest persist_dataset(const Dataset& data, const std::string& dir,
                                const std::vector<double>& plan_echo = {});

/// Loads and validates the dataset a manifest points to.
Dataset ingest(const DatasetManifest& manifest, const std::string& manifest_dir);
Dataset ingest(const std::string& manifest_path);

}  // namespace mtaesth
