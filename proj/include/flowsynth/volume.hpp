#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace flowsynth {

struct Dims {
  std::uint32_t nx = 0;
  std::uint32_t ny = 0;
  std::uint32_t nz = 0;

  std::size_t count() const { return std::size_t{nx} * ny * nz; }
  bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);
// Parses "NxNyNz" like "16x16x16", or a single "N" for a cube.
Dims parse_dims(const std::string& text);

enum class ValueDomain : std::uint8_t { raw = 0, unit_normalized = 1 };

// Dense scalar field, row-major with x fastest: index = x + nx * (y + ny * z).
// Immutable after construction.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims dims, std::vector<float> voxels, ValueDomain domain = ValueDomain::raw);

  static Volume3D filled(Dims dims, float value, ValueDomain domain = ValueDomain::raw);
  static Volume3D from_doubles(Dims dims, std::span<const double> values,
                               ValueDomain domain = ValueDomain::raw);

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return voxels_.size(); }
  std::span<const float> voxels() const { return voxels_; }
  ValueDomain domain() const { return domain_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels_[index(x, y, z)]; }

  std::vector<double> to_doubles() const;

  bool operator==(const Volume3D&) const = default;

 private:
  Dims dims_;
  std::vector<float> voxels_;
  ValueDomain domain_ = ValueDomain::raw;
};

// Integer parcellation. Label 0 is background and never reported as a region.
struct LabelMap3D {
  Dims dims;
  std::vector<std::uint16_t> labels;
  std::map<std::uint16_t, std::string> region_names;

  bool operator==(const LabelMap3D&) const = default;
};

// (v - min) / (max - min) over the whole grid. Throws ConstantVolume when max == min.
Volume3D minmax_normalize(const Volume3D& v);

// Centered crop on shrinking axes, symmetric padding with `fill` on growing
// axes; an odd remainder goes to the high-index side.
Volume3D crop_or_pad(const Volume3D& v, Dims target, float fill = 0.0f);

// VOL1 / LBL1 binary formats (little-endian, see README).
void write_volume(const std::filesystem::path& path, const Volume3D& v);
Volume3D read_volume(const std::filesystem::path& path);
void write_labelmap(const std::filesystem::path& path, const LabelMap3D& labels);
LabelMap3D read_labelmap(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const Volume3D& v);
Volume3D decode_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_labelmap(const LabelMap3D& labels);
LabelMap3D decode_labelmap(std::span<const std::uint8_t> bytes);

}  // namespace flowsynth
