#include "flowsynth/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "flowsynth/binio.hpp"
#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

constexpr std::string_view kVolumeMagic = "VOL1";
constexpr std::string_view kLabelMagic = "LBL1";

// Source offset for one axis: positive = crop start, negative = pad before.
std::ptrdiff_t axis_offset(std::uint32_t src, std::uint32_t dst) {
  if (src >= dst) return static_cast<std::ptrdiff_t>((src - dst) / 2);
  return -static_cast<std::ptrdiff_t>((dst - src) / 2);
}

Dims read_header(binio::Reader& in, std::string_view magic, std::uint8_t& flag) {
  if (in.remaining() < 4 || in.bytes(4) != magic) {
    throw Error(Errc::bad_magic, "expected " + std::string(magic) + " magic");
  }
  Dims d;
  d.nx = in.u32();
  d.ny = in.u32();
  d.nz = in.u32();
  flag = in.u8();
  if (!d.positive()) throw Error(Errc::dim_mismatch, "header dims must be positive, got " + to_string(d));
  return d;
}

}  // namespace

std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

Dims parse_dims(const std::string& text) {
  std::vector<std::uint32_t> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, 'x')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      parts.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw Error(Errc::bad_dims, "cannot parse dims '" + text + "'");
    }
  }
  if (parts.size() == 1) return {parts[0], parts[0], parts[0]};
  if (parts.size() != 3) throw Error(Errc::bad_dims, "cannot parse dims '" + text + "'");
  return {parts[0], parts[1], parts[2]};
}

Volume3D::Volume3D(Dims dims, std::vector<float> voxels, ValueDomain domain)
    : dims_(dims), voxels_(std::move(voxels)), domain_(domain) {
  if (!dims_.positive()) throw Error(Errc::bad_dims, "volume dims must be positive, got " + to_string(dims_));
  if (voxels_.size() != dims_.count()) {
    throw Error(Errc::dim_mismatch, "voxel count " + std::to_string(voxels_.size()) + " != " +
                                        to_string(dims_));
  }
  for (float v : voxels_) {
    if (!std::isfinite(v)) throw Error(Errc::non_finite, "volume contains NaN/Inf");
    if (domain_ == ValueDomain::unit_normalized && (v < 0.0f || v > 1.0f)) {
      throw Error(Errc::bad_argument, "unit_normalized volume has voxel outside [0,1]");
    }
  }
}

Volume3D Volume3D::filled(Dims dims, float value, ValueDomain domain) {
  return Volume3D(dims, std::vector<float>(dims.count(), value), domain);
}

Volume3D Volume3D::from_doubles(Dims dims, std::span<const double> values, ValueDomain domain) {
  std::vector<float> v(values.size());
  std::transform(values.begin(), values.end(), v.begin(), [](double x) { return static_cast<float>(x); });
  return Volume3D(dims, std::move(v), domain);
}

std::vector<double> Volume3D::to_doubles() const { return {voxels_.begin(), voxels_.end()}; }

Volume3D minmax_normalize(const Volume3D& v) {
  const auto [lo_it, hi_it] = std::minmax_element(v.voxels().begin(), v.voxels().end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) throw Error(Errc::constant_volume, "cannot min-max normalize a constant volume");
  const double range = hi - lo;
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>((static_cast<double>(v.voxels()[i]) - lo) / range);
  }
  return Volume3D(v.dims(), std::move(out), ValueDomain::unit_normalized);
}

Volume3D crop_or_pad(const Volume3D& v, Dims target, float fill) {
  if (!target.positive()) throw Error(Errc::bad_dims, "target dims must be positive");
  const Dims& src = v.dims();
  const std::ptrdiff_t ox = axis_offset(src.nx, target.nx);
  const std::ptrdiff_t oy = axis_offset(src.ny, target.ny);
  const std::ptrdiff_t oz = axis_offset(src.nz, target.nz);
  std::vector<float> out(target.count(), fill);
  for (std::uint32_t z = 0; z < target.nz; ++z) {
    const std::ptrdiff_t sz = z + oz;
    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(src.nz)) continue;
    for (std::uint32_t y = 0; y < target.ny; ++y) {
      const std::ptrdiff_t sy = y + oy;
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(src.ny)) continue;
      for (std::uint32_t x = 0; x < target.nx; ++x) {
        const std::ptrdiff_t sx = x + ox;
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(src.nx)) continue;
        out[x + std::size_t{target.nx} * (y + std::size_t{target.ny} * z)] = v.at(sx, sy, sz);
      }
    }
  }
  const bool unit = v.domain() == ValueDomain::unit_normalized && fill >= 0.0f && fill <= 1.0f;
  return Volume3D(target, std::move(out), unit ? ValueDomain::unit_normalized : ValueDomain::raw);
}

std::vector<std::uint8_t> encode_volume(const Volume3D& v) {
  binio::Writer w;
  w.bytes(kVolumeMagic);
  w.u32(v.dims().nx);
  w.u32(v.dims().ny);
  w.u32(v.dims().nz);
  w.u8(static_cast<std::uint8_t>(v.domain()));
  for (float f : v.voxels()) w.f32(f);
  return std::move(w.buffer());
}

Volume3D decode_volume(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes);
  std::uint8_t flag = 0;
  const Dims d = read_header(in, kVolumeMagic, flag);
  if (flag > 1) throw Error(Errc::bad_header, "unknown value_domain flag " + std::to_string(flag));
  const std::size_t need = d.count() * 4;
  if (in.remaining() < need) {
    throw Error(Errc::truncated_file, "header claims " + to_string(d) + " but payload holds " +
                                          std::to_string(in.remaining() / 4) + " scalars");
  }
  if (in.remaining() > need) throw Error(Errc::dim_mismatch, "payload longer than header dims " + to_string(d));
  std::vector<float> vox(d.count());
  for (auto& f : vox) f = in.f32();
  return Volume3D(d, std::move(vox), static_cast<ValueDomain>(flag));
}

std::vector<std::uint8_t> encode_labelmap(const LabelMap3D& labels) {
  if (labels.labels.size() != labels.dims.count()) {
    throw Error(Errc::dim_mismatch, "label count does not match " + to_string(labels.dims));
  }
  binio::Writer w;
  w.bytes(kLabelMagic);
  w.u32(labels.dims.nx);
  w.u32(labels.dims.ny);
  w.u32(labels.dims.nz);
  w.u8(0);
  for (auto l : labels.labels) w.u16(l);
  w.u16(static_cast<std::uint16_t>(labels.region_names.size()));
  for (const auto& [id, name] : labels.region_names) {
    w.u16(id);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
  }
  return std::move(w.buffer());
}

LabelMap3D decode_labelmap(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes);
  std::uint8_t flag = 0;
  LabelMap3D out;
  out.dims = read_header(in, kLabelMagic, flag);
  if (in.remaining() < out.dims.count() * 2) {
    throw Error(Errc::truncated_file, "label payload shorter than header dims " + to_string(out.dims));
  }
  out.labels.resize(out.dims.count());
  for (auto& l : out.labels) l = in.u16();
  const std::uint16_t n = in.u16();
  for (std::uint16_t i = 0; i < n; ++i) {
    const std::uint16_t id = in.u16();
    const std::uint16_t len = in.u16();
    out.region_names[id] = in.bytes(len);
  }
  if (in.remaining() != 0) throw Error(Errc::dim_mismatch, "trailing bytes after label name table");
  return out;
}

void write_volume(const std::filesystem::path& path, const Volume3D& v) {
  binio::write_file(path, encode_volume(v));
}

Volume3D read_volume(const std::filesystem::path& path) { return decode_volume(binio::read_file(path)); }

void write_labelmap(const std::filesystem::path& path, const LabelMap3D& labels) {
  binio::write_file(path, encode_labelmap(labels));
}

LabelMap3D read_labelmap(const std::filesystem::path& path) {
  return decode_labelmap(binio::read_file(path));
}

}  // namespace flowsynth
