#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowsynth/params.hpp"

namespace flowsynth {

// One CKPT1 record: a named float32 array.
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  bool operator==(const CheckpointEntry&) const = default;
};

// Ordered list of records. Layout on disk (little-endian):
//   "CKPT1" | u32 count | per entry: u32 name_len, name bytes, u32 rank,
//   rank x u32 dims, prod(dims) x f32.
class Checkpoint {
 public:
  void put(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values);
  void put_doubles(const std::string& name, std::span<const double> values);
  void put_scalar(const std::string& name, double v) { put_doubles(name, std::span<const double>(&v, 1)); }
  // u64 split into four exact 16-bit chunks.
  void put_u64(const std::string& name, std::uint64_t v);

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;
  std::vector<double> doubles(const std::string& name) const;
  double scalar(const std::string& name) const;
  std::uint64_t u64(const std::string& name) const;

  void add_params(const diff::ParamStore& params, const std::string& prefix = "");
  // Every entry whose name starts with `prefix`, prefix stripped, in file order.
  diff::ParamStore params(const std::string& prefix = "") const;

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<CheckpointEntry> entries_;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace flowsynth
