#include "mtaesth/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mtaesth/errors.hpp"

namespace mtaesth {

namespace fs = std::filesystem;

AestheticLabel delta_label(double mean_score, double midpoint, double delta) {
  if (delta < 0.0) throw input_error("delta must be nonnegative");
  if (mean_score > midpoint + delta) return AestheticLabel::kHigh;
  if (mean_score < midpoint - delta) return AestheticLabel::kLow;
  return AestheticLabel::kDiscard;
}

Split make_split(const Dataset& data, double delta_train,
                 std::uint64_t split_seed, double train_fraction,
                 double test_fraction) {
  if (data.records.empty()) throw data_error("dataset has no records");
  if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9) {
    throw config_error("split fractions must sum to 1");
  }
  std::vector<std::size_t> order(data.records.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(split_seed, "split"));
  rng.shuffle(order);

  const std::size_t n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(order.size())));

  Split split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t rec = order[i];
    const bool is_test = i < n_test;
    const double delta = is_test ? 0.0 : delta_train;
    switch (delta_label(data.records[rec].mean_score, data.midpoint, delta)) {
      case AestheticLabel::kHigh:
        (is_test ? split.test : split.train).push_back({rec, 1});
        break;
      case AestheticLabel::kLow:
        (is_test ? split.test : split.train).push_back({rec, 0});
        break;
      case AestheticLabel::kDiscard:
        break;
    }
  }

  auto check_side = [](const std::vector<LabeledIndex>& side,
                       const char* name) {
    if (side.empty()) {
      throw data_error(std::string("empty ") + name + " split");
    }
    bool has[2] = {false, false};
    for (const auto& [rec, y] : side) has[y] = true;
    if (!has[0] || !has[1]) {
      throw data_error(std::string("class ") + (has[0] ? "high" : "low") +
                       " is empty in the " + name + " split");
    }
  };
  check_side(split.train, "train");
  check_side(split.test, "test");
  return split;
}

void crop_patch(const Dataset& data, const RawRecord& rec, std::size_t y0,
                std::size_t x0, std::size_t crop_h, std::size_t crop_w,
                bool hflip, const std::array<double, 3>& channel_means,
                double* out) {
  if (crop_h > data.height || crop_w > data.width ||
      y0 + crop_h > data.height || x0 + crop_w > data.width) {
    throw input_error("crop exceeds the source image");
  }
  const std::size_t w = data.width;
  for (std::size_t y = 0; y < crop_h; ++y) {
    const std::uint8_t* row = rec.pixels.data() + ((y0 + y) * w + x0) * 3;
    double* orow = out + y * crop_w * 3;
    for (std::size_t x = 0; x < crop_w; ++x) {
      const std::size_t sx = hflip ? crop_w - 1 - x : x;
      for (std::size_t c = 0; c < 3; ++c) {
        orow[x * 3 + c] =
            static_cast<double>(row[sx * 3 + c]) / 255.0 - channel_means[c];
      }
    }
  }
}

void augment(const Dataset& data, const RawRecord& rec, Rng& rng,
             std::size_t crop_h, std::size_t crop_w,
             const std::array<double, 3>& channel_means, double* out) {
  if (crop_h > data.height || crop_w > data.width) {
    throw input_error("crop larger than the source image");
  }
  const std::size_t y0 = rng.below(data.height - crop_h + 1);
  const std::size_t x0 = rng.below(data.width - crop_w + 1);
  const bool flip = rng.bernoulli(0.5);
  crop_patch(data, rec, y0, x0, crop_h, crop_w, flip, channel_means, out);
}

void center_crop(const Dataset& data, const RawRecord& rec, std::size_t crop_h,
                 std::size_t crop_w, const std::array<double, 3>& channel_means,
                 double* out) {
  if (crop_h > data.height || crop_w > data.width) {
    throw input_error("crop larger than the source image");
  }
  crop_patch(data, rec, (data.height - crop_h) / 2, (data.width - crop_w) / 2,
             crop_h, crop_w, false, channel_means, out);
}

void flip_horizontal(std::size_t h, std::size_t w, std::size_t c, double* buf) {
  for (std::size_t y = 0; y < h; ++y) {
    double* row = buf + y * w * c;
    for (std::size_t x = 0; x < w / 2; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::swap(row[x * c + ch], row[(w - 1 - x) * c + ch]);
      }
    }
  }
}

std::array<double, 3> channel_means(const Dataset& data,
                                    const std::vector<LabeledIndex>& records) {
  std::array<double, 3> m{0.0, 0.0, 0.0};
  std::size_t count = 0;
  for (const auto& [rec, y] : records) {
    const auto& px = data.records[rec].pixels;
    for (std::size_t i = 0; i < px.size(); i += 3) {
      m[0] += px[i];
      m[1] += px[i + 1];
      m[2] += px[i + 2];
    }
    count += px.size() / 3;
  }
  if (count == 0) throw data_error("no records to compute channel means");
  for (double& x : m) x /= 255.0 * static_cast<double>(count);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

GenSpec GenSpec::from_kv(const KvFile& kv) {
  kv.require_known_keys({"n", "m", "height", "width", "plan", "noise",
                         "cue_strength", "code_strength", "secondary_prob",
                         "xor_pair", "xor_high", "xor_weight", "scale_min",
                         "scale_max", "midpoint", "seed"});
  GenSpec s;
  s.n = static_cast<std::size_t>(kv.get_int("n"));
  s.m = static_cast<std::size_t>(kv.get_int("m"));
  s.height = static_cast<std::size_t>(kv.get_int_or("height", 40));
  s.width = static_cast<std::size_t>(kv.get_int_or("width", 40));
  s.plan = kv.get_doubles("plan");
  s.noise = kv.get_double_or("noise", 0.15);
  s.cue_strength = kv.get_double_or("cue_strength", 0.25);
  s.code_strength = kv.get_double_or("code_strength", 1.0);
  s.secondary_prob = kv.get_double_or("secondary_prob", 0.15);
  if (kv.has("xor_pair")) {
    const std::vector<long> pair = kv.get_ints("xor_pair");
    if (pair.size() != 2) {
      throw config_error("xor_pair needs exactly two attribute indices");
    }
    s.xor_a = pair[0];
    s.xor_b = pair[1];
  }
  s.xor_high = kv.get_double_or("xor_high", 0.92);
  s.xor_weight = kv.get_double_or("xor_weight", s.xor_a >= 0 ? 0.2 : 0.0);
  s.scale_min = kv.get_double_or("scale_min", 1.0);
  s.scale_max = kv.get_double_or("scale_max", 10.0);
  s.midpoint = kv.get_double_or("midpoint", 5.0);
  s.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", 1));
  return s;
}

KvFile GenSpec::to_kv() const {
  KvFile kv;
  auto num = [](double x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.12g", x);
    return std::string(buf);
  };
  kv.set("n", std::to_string(n));
  kv.set("m", std::to_string(m));
  kv.set("height", std::to_string(height));
  kv.set("width", std::to_string(width));
  std::string p;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (i) p += ",";
    p += num(plan[i]);
  }
  kv.set("plan", p);
  kv.set("noise", num(noise));
  kv.set("cue_strength", num(cue_strength));
  kv.set("code_strength", num(code_strength));
  kv.set("secondary_prob", num(secondary_prob));
  if (xor_a >= 0) {
    kv.set("xor_pair", std::to_string(xor_a) + "," + std::to_string(xor_b));
    kv.set("xor_high", num(xor_high));
    kv.set("xor_weight", num(xor_weight));
  }
  kv.set("scale_min", num(scale_min));
  kv.set("scale_max", num(scale_max));
  kv.set("midpoint", num(midpoint));
  kv.set("seed", std::to_string(seed));
  return kv;
}

namespace {

std::uint8_t quantize(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Distinct color per attribute, roughly evenly spaced hues.
std::array<double, 3> attr_color(std::size_t m, std::size_t total) {
  const double hue = 6.0 * static_cast<double>(m) / static_cast<double>(total);
  const int i = static_cast<int>(hue) % 6;
  const double f = hue - std::floor(hue);
  const double v = 0.9, p = 0.15, q = v - (v - p) * f, t = p + (v - p) * f;
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct CellGeometry {
  std::size_t margin_y, margin_x, grid_rows, grid_cols, cell_h, cell_w;
};

CellGeometry cell_geometry(const GenSpec& spec) {
  CellGeometry g;
  g.margin_y = spec.height / 5;  // codes stay inside every random crop
  g.margin_x = spec.width / 5;
  g.grid_cols = 1;
  while (g.grid_cols * g.grid_cols < spec.m) ++g.grid_cols;
  g.grid_rows = (spec.m + g.grid_cols - 1) / g.grid_cols;
  const std::size_t region_h = spec.height - 2 * g.margin_y;
  const std::size_t region_w = spec.width - 2 * g.margin_x;
  g.cell_h = region_h / g.grid_rows;
  g.cell_w = region_w / g.grid_cols;
  if (g.cell_h < 2 || g.cell_w < 2) {
    throw config_error("image too small to render " + std::to_string(spec.m) +
                       " attribute cells");
  }
  return g;
}

double stripe_mask(std::size_t attr, std::size_t y, std::size_t x) {
  std::size_t phase;
  switch (attr % 4) {
    case 0: phase = y; break;
    case 1: phase = x; break;
    case 2: phase = y + x; break;
    default: phase = y + 3 * x; break;
  }
  return (phase / 2) % 2 == 0 ? 1.0 : 0.35;
}

std::array<double, 3> background_color(const GenSpec& spec, std::size_t y,
                                       std::size_t x) {
  const double fy = static_cast<double>(y) / static_cast<double>(spec.height);
  const double fx = static_cast<double>(x) / static_cast<double>(spec.width);
  return {0.5 + 0.08 * std::sin(6.283185307179586 * (fy + fx)),
          0.5 + 0.08 * std::sin(6.283185307179586 * (fy - fx) + 1.0),
          0.5 + 0.08 * std::cos(6.283185307179586 * fx + 0.5)};
}

/// P(high | primary = m) for the content attributes, solved from the
/// requested conditionals P(high | attribute m present) under the
/// single/pair tagging model. When the interaction channel is on, its
/// probability mass dilutes every content conditional toward 1/2; the
/// targets are rescaled so the requested plan still holds exactly.
std::vector<double> solve_primary_probs(const GenSpec& spec,
                                        const std::vector<std::size_t>& content) {
  const std::size_t mc = content.size();
  const double xw = spec.xor_a >= 0 ? spec.xor_weight : 0.0;
  std::vector<double> target(mc);
  for (std::size_t i = 0; i < mc; ++i) {
    target[i] = (spec.plan[content[i]] - 0.5 * xw) / (1.0 - xw);
  }
  const double p2 = mc >= 2 ? spec.secondary_prob : 0.0;
  const double b = mc >= 2 ? p2 / static_cast<double>(mc - 1) : 0.0;
  const double a = 1.0 - b;
  const double target_sum = std::accumulate(target.begin(), target.end(), 0.0);
  std::vector<double> q(mc);
  for (std::size_t i = 0; i < mc; ++i) {
    q[i] = ((1.0 + p2) * target[i] - b * target_sum) / a;
    if (q[i] < 0.0 || q[i] > 1.0) {
      throw config_error(
          "infeasible correlation plan: attribute " +
          std::to_string(content[i]) + " needs P(high|primary) = " +
          std::to_string(q[i]) +
          ", outside [0,1]; soften the plan, lower secondary_prob or lower "
          "xor_weight");
    }
  }
  return q;
}

}  // namespace

CellRect attribute_cell(const GenSpec& spec, std::size_t attr) {
  const CellGeometry g = cell_geometry(spec);
  CellRect r;
  r.y0 = g.margin_y + (attr / g.grid_cols) * g.cell_h;
  r.x0 = g.margin_x + (attr % g.grid_cols) * g.cell_w;
  r.h = g.cell_h;
  r.w = g.cell_w;
  return r;
}

std::vector<std::uint8_t> attribute_template(const GenSpec& spec,
                                             std::size_t attr) {
  const CellRect r = attribute_cell(spec, attr);
  const std::array<double, 3> color = attr_color(attr, spec.m);
  std::vector<std::uint8_t> px(r.h * r.w * 3);
  for (std::size_t y = 0; y < r.h; ++y) {
    for (std::size_t x = 0; x < r.w; ++x) {
      const double s = stripe_mask(attr, y, x);
      const std::array<double, 3> bg =
          background_color(spec, r.y0 + y, r.x0 + x);
      for (std::size_t c = 0; c < 3; ++c) {
        const double code = color[c] * s;
        px[(y * r.w + x) * 3 + c] =
            quantize(bg[c] + spec.code_strength * (code - bg[c]));
      }
    }
  }
  return px;
}

SyntheticData generate_synthetic(const GenSpec& spec) {
  if (spec.m < 2) throw config_error("need at least 2 attributes");
  if (spec.n < 100) throw config_error("need at least 100 records");
  if (spec.plan.size() != spec.m) {
    throw config_error("plan has " + std::to_string(spec.plan.size()) +
                       " entries for " + std::to_string(spec.m) +
                       " attributes");
  }
  for (std::size_t i = 0; i < spec.plan.size(); ++i) {
    if (spec.plan[i] < 0.0 || spec.plan[i] > 1.0) {
      throw config_error("plan probability for attribute " +
                         std::to_string(i) + " is outside [0,1]");
    }
  }
  if (spec.noise < 0.0) throw config_error("noise must be nonnegative");
  if (spec.code_strength < 0.0 || spec.code_strength > 1.0) {
    throw config_error("code_strength must lie in [0,1]");
  }
  if (spec.secondary_prob < 0.0 || spec.secondary_prob >= 1.0) {
    throw config_error("secondary_prob must be in [0,1)");
  }
  if (!(spec.scale_min < spec.midpoint && spec.midpoint < spec.scale_max)) {
    throw config_error("score scale must straddle the midpoint");
  }

  const bool xor_on = spec.xor_a >= 0 || spec.xor_b >= 0;
  std::vector<std::size_t> content;
  if (xor_on) {
    if (spec.xor_a < 0 || spec.xor_b < 0 ||
        spec.xor_a >= static_cast<long>(spec.m) ||
        spec.xor_b >= static_cast<long>(spec.m) || spec.xor_a == spec.xor_b) {
      throw config_error("xor_pair must name two distinct attributes");
    }
    if (spec.xor_weight < 0.0 || spec.xor_weight >= 1.0) {
      throw config_error("xor_weight must lie in [0,1)");
    }
    if (spec.xor_high < 0.5 || spec.xor_high > 1.0) {
      throw config_error("xor_high must lie in [0.5,1]");
    }
    if (spec.m < 3) {
      throw config_error("the interaction channel needs a content attribute "
                         "besides the pair");
    }
  }
  for (std::size_t m = 0; m < spec.m; ++m) {
    if (xor_on && (static_cast<long>(m) == spec.xor_a ||
                   static_cast<long>(m) == spec.xor_b)) {
      continue;
    }
    content.push_back(m);
  }

  SyntheticData out;
  out.plan = spec.plan;
  const std::vector<double> q = solve_primary_probs(spec, content);
  out.primary_prob.assign(spec.m, 0.5);
  for (std::size_t i = 0; i < content.size(); ++i) {
    out.primary_prob[content[i]] = q[i];
  }
  if (xor_on) {
    // the pair's own conditionals are fixed by the mixture; the declared
    // plan must agree with them
    double mean_q = std::accumulate(q.begin(), q.end(), 0.0) / q.size();
    const double pair_cond =
        spec.xor_weight * 0.5 + (1.0 - spec.xor_weight) * mean_q;
    for (long idx : {spec.xor_a, spec.xor_b}) {
      if (std::abs(spec.plan[idx] - pair_cond) > 0.01) {
        throw config_error(
            "plan entry for xor attribute " + std::to_string(idx) +
            " must equal its induced conditional " + std::to_string(pair_cond));
      }
    }
  }

  Dataset& d = out.dataset;
  d.height = spec.height;
  d.width = spec.width;
  d.attributes = spec.m;
  d.scale_min = spec.scale_min;
  d.scale_max = spec.scale_max;
  d.midpoint = spec.midpoint;
  d.full_coverage = true;
  for (std::size_t m = 0; m < spec.m; ++m) {
    d.attribute_names.push_back("attr_" + std::to_string(m));
  }

  const CellGeometry geom = cell_geometry(spec);
  (void)geom;
  std::vector<std::vector<std::uint8_t>> templates;
  std::vector<CellRect> rects;
  for (std::size_t m = 0; m < spec.m; ++m) {
    templates.push_back(attribute_template(spec, m));
    rects.push_back(attribute_cell(spec, m));
  }

  Rng rng(derive_seed(spec.seed, "synthetic"));
  const double hi_lo = spec.midpoint + 0.25;
  const double hi_hi = spec.scale_max - 0.5;
  const double lo_hi = spec.midpoint - 0.25;
  const double lo_lo = spec.scale_min + 0.5;

  d.records.reserve(spec.n);
  out.primary.reserve(spec.n);
  for (std::size_t n = 0; n < spec.n; ++n) {
    RawRecord rec;
    rec.semantic.assign(spec.m, 0);
    const std::size_t primary = content[rng.below(content.size())];
    rec.semantic[primary] = 1;
    double p_high = out.primary_prob[primary];
    if (content.size() >= 2 && rng.bernoulli(spec.secondary_prob)) {
      std::size_t pick = rng.below(content.size() - 1);
      std::size_t secondary = content[pick];
      if (secondary >= primary) secondary = content[pick + 1];
      rec.semantic[secondary] = 1;
      p_high = 0.5 * (p_high + out.primary_prob[secondary]);
    }
    if (xor_on) {
      const bool za = rng.bernoulli(0.5);
      const bool zb = rng.bernoulli(0.5);
      rec.semantic[spec.xor_a] = za ? 1 : 0;
      rec.semantic[spec.xor_b] = zb ? 1 : 0;
      if (rng.bernoulli(spec.xor_weight)) {
        p_high = (za != zb) ? spec.xor_high : 1.0 - spec.xor_high;
      }
    }
    const bool high = rng.bernoulli(p_high);
    rec.mean_score = high ? hi_lo + rng.uniform() * (hi_hi - hi_lo)
                          : lo_hi - rng.uniform() * (lo_hi - lo_lo);

    rec.pixels.resize(spec.height * spec.width * 3);
    const double contrast = 1.0 + (high ? spec.cue_strength : -spec.cue_strength);
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        const std::array<double, 3> bg = background_color(spec, y, x);
        for (std::size_t c = 0; c < 3; ++c) {
          double v = 0.5 + contrast * (bg[c] - 0.5);
          if (spec.noise > 0.0) v += spec.noise * rng.normal();
          rec.pixels[(y * spec.width + x) * 3 + c] = quantize(v);
        }
      }
    }
    for (std::size_t m = 0; m < spec.m; ++m) {
      if (!rec.semantic[m]) continue;
      const CellRect& r = rects[m];
      const auto& tpl = templates[m];
      for (std::size_t y = 0; y < r.h; ++y) {
        for (std::size_t x = 0; x < r.w; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            double v =
                static_cast<double>(tpl[(y * r.w + x) * 3 + c]) / 255.0;
            if (spec.noise > 0.0) v += spec.noise * rng.normal();
            rec.pixels[((r.y0 + y) * spec.width + r.x0 + x) * 3 + c] =
                spec.noise > 0.0 ? quantize(v) : tpl[(y * r.w + x) * 3 + c];
          }
        }
      }
    }
    out.primary.push_back(primary);
    d.records.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kContainerMagic[4] = {'M', 'T', 'I', 'C'};
constexpr std::uint32_t kContainerVersion = 1;

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n,
                    std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw data_error("truncated container while reading " + what);
  }
  return v;
}

std::string format_num(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

}  // namespace

DatasetManifest DatasetManifest::load(const std::string& path) {
  KvFile kv = KvFile::load(path);
  kv.require_known_keys({"container", "labels", "m", "midpoint", "scale_min",
                         "scale_max", "delta", "split_seed", "train_fraction",
                         "test_fraction", "full_coverage", "plan"});
  DatasetManifest m;
  m.container = kv.get("container");
  m.labels = kv.get("labels");
  m.attributes = static_cast<std::size_t>(kv.get_int("m"));
  m.midpoint = kv.get_double_or("midpoint", 5.0);
  m.scale_min = kv.get_double_or("scale_min", 1.0);
  m.scale_max = kv.get_double_or("scale_max", 10.0);
  m.delta = kv.get_double_or("delta", 0.0);
  m.split_seed = static_cast<std::uint64_t>(kv.get_int_or("split_seed", 1));
  m.train_fraction = kv.get_double_or("train_fraction", 0.8);
  m.test_fraction = kv.get_double_or("test_fraction", 0.2);
  m.full_coverage = kv.get_bool_or("full_coverage", true);
  if (kv.has("plan")) m.plan = kv.get_doubles("plan");
  if (std::abs(m.train_fraction + m.test_fraction - 1.0) > 1e-9) {
    throw config_error(path + ": split fractions must sum to 1");
  }
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  KvFile kv;
  kv.set("container", container);
  kv.set("labels", labels);
  kv.set("m", std::to_string(attributes));
  kv.set("midpoint", format_num(midpoint));
  kv.set("scale_min", format_num(scale_min));
  kv.set("scale_max", format_num(scale_max));
  kv.set("delta", format_num(delta));
  kv.set("split_seed", std::to_string(split_seed));
  kv.set("train_fraction", format_num(train_fraction));
  kv.set("test_fraction", format_num(test_fraction));
  kv.set("full_coverage", full_coverage ? "1" : "0");
  if (!plan.empty()) {
    std::string p;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (i) p += ",";
      p += format_num(plan[i]);
    }
    kv.set("plan", p);
  }
  kv.save(path);
}

DatasetManifest persist_dataset(const Dataset& data, const std::string& dir,
                                const std::vector<double>& plan_echo) {
  fs::create_directories(dir);

  {
    std::ofstream out(fs::path(dir) / "container.bin", std::ios::binary);
    if (!out) throw data_error("cannot write container in '" + dir + "'");
    out.write(kContainerMagic, 4);
    write_pod(out, kContainerVersion);
    write_pod(out, static_cast<std::uint32_t>(data.records.size()));
    write_pod(out, static_cast<std::uint16_t>(data.height));
    write_pod(out, static_cast<std::uint16_t>(data.width));
    write_pod(out, static_cast<std::uint16_t>(3));
    std::uint64_t checksum = 0xcbf29ce484222325ull;
    for (const auto& rec : data.records) {
      checksum = fnv1a(rec.pixels.data(), rec.pixels.size(), checksum);
    }
    write_pod(out, checksum);
    for (const auto& rec : data.records) {
      out.write(reinterpret_cast<const char*>(rec.pixels.data()),
                static_cast<std::streamsize>(rec.pixels.size()));
    }
  }

  {
    std::ofstream out(fs::path(dir) / "labels.csv");
    if (!out) throw data_error("cannot write labels in '" + dir + "'");
    out << "id,mean_score";
    for (const auto& name : data.attribute_names) out << "," << name;
    out << "\n";
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      const auto& rec = data.records[i];
      out << i << "," << format_num(rec.mean_score);
      for (std::uint8_t z : rec.semantic) out << "," << int(z);
      out << "\n";
    }
  }

  DatasetManifest m;
  m.container = "container.bin";
  m.labels = "labels.csv";
  m.attributes = data.attributes;
  m.midpoint = data.midpoint;
  m.scale_min = data.scale_min;
  m.scale_max = data.scale_max;
  m.full_coverage = data.full_coverage;
  m.plan = plan_echo;
  m.save((fs::path(dir) / "manifest.txt").string());
  return m;
}

Dataset ingest(const DatasetManifest& manifest,
               const std::string& manifest_dir) {
  Dataset d;
  d.attributes = manifest.attributes;
  d.midpoint = manifest.midpoint;
  d.scale_min = manifest.scale_min;
  d.scale_max = manifest.scale_max;
  d.full_coverage = manifest.full_coverage;

  const fs::path dir(manifest_dir);
  const std::string container_path = (dir / manifest.container).string();
  const std::string labels_path = (dir / manifest.labels).string();

  std::ifstream in(container_path, std::ios::binary);
  if (!in) throw data_error("cannot open container '" + container_path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0) {
    throw data_error(container_path + ": bad container magic");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kContainerVersion) {
    throw data_error(container_path + ": unsupported container version " +
                     std::to_string(version));
  }
  const auto count = read_pod<std::uint32_t>(in, "count");
  d.height = read_pod<std::uint16_t>(in, "height");
  d.width = read_pod<std::uint16_t>(in, "width");
  const auto chans = read_pod<std::uint16_t>(in, "channels");
  if (chans != 3) {
    throw data_error(container_path + ": expected 3 channels, got " +
                     std::to_string(chans));
  }
  const auto stored_checksum = read_pod<std::uint64_t>(in, "checksum");

  d.records.resize(count);
  std::uint64_t checksum = 0xcbf29ce484222325ull;
  const std::size_t bytes = d.height * d.width * 3;
  for (std::uint32_t i = 0; i < count; ++i) {
    d.records[i].pixels.resize(bytes);
    if (!in.read(reinterpret_cast<char*>(d.records[i].pixels.data()),
                 static_cast<std::streamsize>(bytes))) {
      throw data_error(container_path + ": truncated at record " +
                       std::to_string(i));
    }
    checksum = fnv1a(d.records[i].pixels.data(), bytes, checksum);
  }
  if (checksum != stored_checksum) {
    throw data_error(container_path + ": pixel checksum mismatch");
  }

  std::ifstream lab(labels_path);
  if (!lab) throw data_error("cannot open labels '" + labels_path + "'");
  std::string line;
  if (!std::getline(lab, line)) {
    throw data_error(labels_path + ": empty label table");
  }
  std::vector<std::string> header = split_csv_list(line);
  if (header.size() != 2 + d.attributes || header[0] != "id" ||
      header[1] != "mean_score") {
    throw data_error(labels_path + ": expected header id,mean_score + " +
                     std::to_string(d.attributes) + " attribute columns");
  }
  d.attribute_names.assign(header.begin() + 2, header.end());
  for (const auto& name : d.attribute_names) {
    if (name.empty() || name == "id" || name == "mean_score") {
      throw data_error(labels_path + ": unknown attribute column '" + name +
                       "'");
    }
  }

  std::size_t row = 0;
  int lineno = 1;
  while (std::getline(lab, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (row >= d.records.size()) {
      throw data_error(labels_path + ":" + std::to_string(lineno) +
                       ": more label rows than container records");
    }
    std::vector<std::string> cells = split_csv_list(line);
    if (cells.size() != 2 + d.attributes) {
      throw data_error(labels_path + ":" + std::to_string(lineno) + ": row " +
                       std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(2 + d.attributes));
    }
    char* end = nullptr;
    const double score = std::strtod(cells[1].c_str(), &end);
    if (end == cells[1].c_str() || *end != '\0') {
      throw data_error(labels_path + ":" + std::to_string(lineno) +
                       ": bad mean_score '" + cells[1] + "'");
    }
    if (score < d.scale_min || score > d.scale_max) {
      throw data_error(labels_path + ":" + std::to_string(lineno) +
                       ": mean_score " + cells[1] +
                       " outside the declared scale");
    }
    RawRecord& rec = d.records[row];
    rec.mean_score = score;
    rec.semantic.resize(d.attributes);
    bool any = false;
    for (std::size_t mcol = 0; mcol < d.attributes; ++mcol) {
      const std::string& cell = cells[2 + mcol];
      if (cell != "0" && cell != "1") {
        throw data_error(labels_path + ":" + std::to_string(lineno) +
                         ": attribute value '" + cell + "' is not binary");
      }
      rec.semantic[mcol] = cell == "1" ? 1 : 0;
      any |= rec.semantic[mcol] != 0;
    }
    if (d.full_coverage && !any) {
      throw data_error(labels_path + ":" + std::to_string(lineno) +
                       ": record has no semantic tag but the dataset declares "
                       "full coverage");
    }
    ++row;
  }
  if (row != d.records.size()) {
    throw data_error(labels_path + ": " + std::to_string(row) +
                     " label rows for " + std::to_string(d.records.size()) +
                     " container records");
  }
  return d;
}

Dataset ingest(const std::string& manifest_path) {
  DatasetManifest m = DatasetManifest::load(manifest_path);
  return ingest(m, fs::path(manifest_path).parent_path().string());
}

}  // namespace mtaesth
