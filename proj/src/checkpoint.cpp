#include "mtaesth/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mtaesth/errors.hpp"
#include "mtaesth/kvfile.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace mtaesth {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'A', 'C'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw checkpoint_error(std::string("truncated checkpoint reading ") + what);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ArchitectureConfig& arch,
                     const std::array<double, 3>& channel_means,
                     const ParamStore& params) {
  std::string header = arch.serialize();
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "mean_r = %.17g\nmean_g = %.17g\nmean_b = %.17g\n",
                channel_means[0], channel_means[1], channel_means[2]);
  header += buf;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw checkpoint_error("cannot write checkpoint '" + path + "'");
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, fnv1a(header.data(), header.size()));
  write_pod(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  write_pod(out, static_cast<std::uint32_t>(params.count()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    const ParamTensor& t = params.tensor(i);
    write_pod(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod(out, static_cast<std::uint8_t>(t.group));
    write_pod(out, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t s : t.shape) write_pod(out, static_cast<std::uint32_t>(s));
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw checkpoint_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw checkpoint_error(path + ": not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw checkpoint_error(path + ": unsupported checkpoint version " +
                           std::to_string(version));
  }
  const auto checksum = read_pod<std::uint64_t>(in, "checksum");
  const auto header_len = read_pod<std::uint32_t>(in, "header length");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), header_len)) {
    throw checkpoint_error(path + ": truncated header");
  }
  if (fnv1a(header.data(), header.size()) != checksum) {
    throw checkpoint_error(path + ": header checksum mismatch");
  }

  Checkpoint ckpt;
  KvFile kv = KvFile::parse_text(header, path);
  ckpt.channel_means = {kv.get_double("mean_r"), kv.get_double("mean_g"),
                        kv.get_double("mean_b")};
  // strip the mean lines; the rest is the architecture echo
  KvFile arch_kv;
  for (const auto& [k, v] : kv.entries()) {
    if (k != "mean_r" && k != "mean_g" && k != "mean_b") arch_kv.set(k, v);
  }
  ckpt.arch = ArchitectureConfig::deserialize(arch_kv.serialize());

  const auto count = read_pod<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamTensor t;
    const auto name_len = read_pod<std::uint16_t>(in, "tensor name length");
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len)) {
      throw checkpoint_error(path + ": truncated tensor name");
    }
    t.group = static_cast<ParamGroup>(read_pod<std::uint8_t>(in, "group"));
    const auto ndims = read_pod<std::uint8_t>(in, "rank");
    std::size_t total = 1;
    for (std::uint8_t d = 0; d < ndims; ++d) {
      const auto dim = read_pod<std::uint32_t>(in, "dimension");
      t.shape.push_back(dim);
      total *= dim;
    }
    t.value.resize(total);
    if (!in.read(reinterpret_cast<char*>(t.value.data()),
                 static_cast<std::streamsize>(total * sizeof(double)))) {
      throw checkpoint_error(path + ": truncated tensor data");
    }
    ckpt.params.add(std::move(t));
  }
  return ckpt;
}

void install_params(const Checkpoint& ckpt, ParamStore& into) {
  std::string mismatches;
  for (std::size_t i = 0; i < into.count(); ++i) {
    ParamTensor& dst = into.tensor(i);
    const ParamTensor* src = ckpt.params.find(dst.name);
    if (src == nullptr) {
      mismatches += " missing:" + dst.name;
    } else if (src->shape != dst.shape) {
      mismatches += " shape:" + dst.name;
    }
  }
  for (std::size_t i = 0; i < ckpt.params.count(); ++i) {
    if (into.find(ckpt.params.tensor(i).name) == nullptr) {
      mismatches += " extra:" + ckpt.params.tensor(i).name;
    }
  }
  if (!mismatches.empty()) {
    throw checkpoint_error("checkpoint does not match the architecture:" +
                           mismatches);
  }
  for (std::size_t i = 0; i < into.count(); ++i) {
    ParamTensor& dst = into.tensor(i);
    dst.value = ckpt.params.find(dst.name)->value;
  }
}

std::pair<LayerGraph, ParamStore> restore_graph(const Checkpoint& ckpt) {
  auto [graph, params] = build(ckpt.arch, 0);
  install_params(ckpt, params);
  return {std::move(graph), std::move(params)};
}

}  // namespace mtaesth
