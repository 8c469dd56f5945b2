#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "triplex/nn.hpp"

namespace triplex {

// Weight checkpoint: magic "TPLXCKPT", u32 version, u32 array count, then per
// array: u32 name length, UTF-8 name, u32 rank, u32 dims, f32 payload.
// Little-endian throughout; values are stored as f32 regardless of the
// compute precision.

namespace ckpt_detail {
constexpr char kMagic[8] = {'T', 'P', 'L', 'X', 'C', 'K', 'P', 'T'};

inline void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw IoError("checkpoint: truncated data in " + path);
  return v;
}
}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const ParamStore<T>& ps, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + tmp);
    out.write(ckpt_detail::kMagic, 8);
    ckpt_detail::write_u32(out, 1);
    ckpt_detail::write_u32(out, static_cast<uint32_t>(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& [name, var] = ps.at(i);
      ckpt_detail::write_u32(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      const auto& shape = var.value().shape();
      ckpt_detail::write_u32(out, static_cast<uint32_t>(shape.size()));
      for (int64_t d : shape) ckpt_detail::write_u32(out, static_cast<uint32_t>(d));
      const T* src = var.value().data();
      std::vector<float> payload(static_cast<size_t>(var.value().numel()));
      for (size_t j = 0; j < payload.size(); ++j) payload[j] = static_cast<float>(src[j]);
      out.write(reinterpret_cast<const char*>(payload.data()),
                static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("checkpoint: cannot rename " + tmp + " to " + path);
}

struct CheckpointEntry {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> values;
};

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
    throw IoError("checkpoint: " + path + " is not a TPLXCKPT file");
  const uint32_t version = ckpt_detail::read_u32(in, path);
  if (version != 1)
    throw IoError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  const uint32_t count = ckpt_detail::read_u32(in, path);
  std::vector<CheckpointEntry> out(count);
  for (auto& e : out) {
    const uint32_t name_len = ckpt_detail::read_u32(in, path);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    const uint32_t rank = ckpt_detail::read_u32(in, path);
    e.shape.resize(rank);
    int64_t numel = 1;
    for (auto& d : e.shape) {
      d = ckpt_detail::read_u32(in, path);
      numel *= d;
    }
    e.values.resize(static_cast<size_t>(numel));
    in.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    if (!in) throw IoError("checkpoint: truncated data in " + path);
  }
  return out;
}

template <typename T>
void load_checkpoint(ParamStore<T>& ps, const std::string& path) {
  auto entries = read_checkpoint(path);
  if (entries.size() != ps.size())
    throw ValueError("checkpoint: " + path + " has " + std::to_string(entries.size()) +
                     " arrays, model expects " + std::to_string(ps.size()));
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& [name, var] = ps.at(i);
    if (e.name != name)
      throw ValueError("checkpoint: array " + std::to_string(i) + " is " + e.name +
                       ", model expects " + name);
    if (e.shape != var.value().shape())
      throw ShapeError("checkpoint: " + e.name + " shape " + shape_str(e.shape) + " vs " +
                       shape_str(var.value().shape()));
    Tensor<T> t(e.shape);
    for (size_t j = 0; j < e.values.size(); ++j) t.data()[j] = static_cast<T>(e.values[j]);
    var.set_value(std::move(t));
  }
}

}  // namespace triplex
