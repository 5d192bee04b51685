#include "flowsynth/checkpoint.hpp"

#include <numeric>

#include "flowsynth/binio.hpp"
#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

constexpr std::string_view kMagic = "CKPT1";

std::size_t count_of(const std::vector<std::uint32_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

void Checkpoint::put(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values) {
  if (count_of(dims) != values.size()) throw Error(Errc::dim_mismatch, "checkpoint entry " + name + " size mismatch");
  for (auto& e : entries_) {
    if (e.name == name) {
      e.dims = std::move(dims);
      e.values = std::move(values);
      return;
    }
  }
  entries_.push_back({std::move(name), std::move(dims), std::move(values)});
}

void Checkpoint::put_doubles(const std::string& name, std::span<const double> values) {
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(values.size())};
  put(name, std::move(dims), std::vector<float>(values.begin(), values.end()));
}

void Checkpoint::put_u64(const std::string& name, std::uint64_t v) {
  std::vector<float> chunks(4);
  for (int i = 0; i < 4; ++i) chunks[i] = static_cast<float>((v >> (16 * i)) & 0xFFFFu);
  put(name, {4}, std::move(chunks));
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  const auto* e = find(name);
  if (e == nullptr) throw Error(Errc::bad_argument, "checkpoint has no entry " + name);
  return *e;
}

std::vector<double> Checkpoint::doubles(const std::string& name) const {
  const auto& e = at(name);
  return {e.values.begin(), e.values.end()};
}

double Checkpoint::scalar(const std::string& name) const {
  const auto& e = at(name);
  if (e.values.size() != 1) throw Error(Errc::dim_mismatch, "checkpoint entry " + name + " is not a scalar");
  return e.values[0];
}

std::uint64_t Checkpoint::u64(const std::string& name) const {
  const auto& e = at(name);
  if (e.values.size() != 4) throw Error(Errc::dim_mismatch, "checkpoint entry " + name + " is not a u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(e.values[i]) << (16 * i);
  return v;
}

void Checkpoint::add_params(const diff::ParamStore& params, const std::string& prefix) {
  for (const auto& [name, t] : params) {
    std::vector<std::uint32_t> dims(t.shape().begin(), t.shape().end());
    std::vector<float> values(t.data().begin(), t.data().end());
    put(prefix + name, std::move(dims), std::move(values));
  }
}

diff::ParamStore Checkpoint::params(const std::string& prefix) const {
  diff::ParamStore out;
  for (const auto& e : entries_) {
    if (e.name.compare(0, prefix.size(), prefix) != 0) continue;
    diff::Shape shape(e.dims.begin(), e.dims.end());
    out.add(e.name.substr(prefix.size()), std::move(shape), {e.values.begin(), e.values.end()});
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kMagic);
  w.u32(static_cast<std::uint32_t>(ckpt.entries().size()));
  for (const auto& e : ckpt.entries()) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    for (float f : e.values) w.f32(f);
  }
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes);
  if (in.remaining() < kMagic.size() || in.bytes(kMagic.size()) != kMagic) {
    throw Error(Errc::bad_magic, "expected CKPT1 magic");
  }
  Checkpoint out;
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = in.u32();
    std::string name = in.bytes(len);
    const std::uint32_t rank = in.u32();
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = in.u32();
    const std::size_t n = count_of(dims);
    if (in.remaining() < n * 4) throw Error(Errc::truncated_file, "checkpoint entry " + name + " truncated");
    std::vector<float> values(n);
    for (auto& f : values) f = in.f32();
    out.put(std::move(name), std::move(dims), std::move(values));
  }
  if (in.remaining() != 0) throw Error(Errc::dim_mismatch, "trailing bytes after checkpoint entries");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace flowsynth
