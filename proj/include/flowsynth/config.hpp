#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "flowsynth/adapters.hpp"
#include "flowsynth/rectflow.hpp"
#include "flowsynth/velocitynet.hpp"
#include "flowsynth/volume.hpp"

// Flat `key = value` run configuration with a fixed schema.
namespace flowsynth::config {

struct KeySpec {
  std::string key;
  std::optional<std::string> default_value;  // nullopt: required
  std::string help;
};

// Every accepted key, in the order used for resolved output.
const std::vector<KeySpec>& schema();

using Values = std::map<std::string, std::string>;

// One `key = value` per line; '#' starts a comment, blank lines are ignored.
// Throws BadConfig on syntax errors, unknown keys and duplicates.
Values parse_text(std::string_view text);
Values parse_file(const std::filesystem::path& path);

struct RunConfig {
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;

  Dims dims{16, 16, 16};
  std::size_t n_samples = 32;
  std::size_t n_test = 8;
  std::size_t n_blobs = 6;
  std::size_t n_regions = 8;
  double severity_lo = 0.0;
  double severity_hi = 1.0;
  std::string mask = "full";  // "full" or "random"

  net::NetConfig net;
  flow::FlowConfig flow;
  adapters::AlignOptions align;

  std::size_t sample_steps = 50;
  double alpha = 0.05;
  std::uint16_t ref_region = 1;
  Modality stats_tracer = Modality::a;

  Values resolved;  // every schema key with its effective value
};

// Fills defaults and converts. Throws BadConfig naming the key for a missing
// required key or an unparsable / out-of-range value.
RunConfig resolve(const Values& given);
RunConfig load(const std::filesystem::path& path, const Values& overrides = {});

// Schema order, one `key = value` line each.
std::string to_text(const RunConfig& cfg);
// Writes <dir>/config.resolved.
void write_resolved(const std::filesystem::path& dir, const RunConfig& cfg);
// Commented listing of every key with its default; parses back with parse_text.
std::string schema_text();

}  // namespace flowsynth::config
