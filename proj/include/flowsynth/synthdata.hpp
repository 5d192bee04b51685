#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowsynth/modality.hpp"
#include "flowsynth/volume.hpp"

// Procedural paired volumes with known severity-dependent transfer functions.
namespace flowsynth::synth {

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims dims{16, 16, 16};
  std::size_t n_blobs = 6;
  double severity = 0.0;  // in [0, 1]
  bool delta_f = true;
  bool delta_a = true;
};

struct SamplePair {
  std::uint64_t seed = 0;
  double severity = 0.0;
  Volume3D source;
  std::optional<Volume3D> target_f;  // present iff delta_f
  std::optional<Volume3D> target_a;  // present iff delta_a
  bool delta_f = false;
  bool delta_a = false;
};

// Sum of seeded Gaussian blobs, min-max normalized. Dims must be >= 8 per axis.
Volume3D make_source(std::uint64_t seed, Dims dims, std::size_t n_blobs);

// 3x3x3 mean filter; out-of-grid neighbours clamp to the nearest edge voxel.
Volume3D box_smooth3(const Volume3D& v);

// minmax((1 - 0.5 s) * v + 0.2 s * box_smooth3(v))
Volume3D oracle_f(const Volume3D& source, double severity);
// minmax(v ^ (1 + s))
Volume3D oracle_a(const Volume3D& source, double severity);

SamplePair generate_sample(const PhantomSpec& spec);

// Samplers are pure functions of the sample index; seeding is captured inside.
using SeveritySampler = std::function<double(std::size_t)>;
using MaskSampler = std::function<std::pair<bool, bool>(std::size_t)>;

SeveritySampler uniform_severity(std::uint64_t seed, double lo = 0.0, double hi = 1.0);
// Cycles through `levels` by index.
SeveritySampler cyclic_severity(std::vector<double> levels);
MaskSampler full_mask();
// Each tracer kept with probability p; if both drop, one is restored at random.
MaskSampler random_mask(std::uint64_t seed, double p_f = 0.75, double p_a = 0.75);

struct DatasetSpec {
  std::size_t n = 1;
  std::uint64_t base_seed = 0;
  Dims dims{16, 16, 16};
  std::size_t n_blobs = 6;
};

// Sample i uses seed base_seed + i.
std::vector<SamplePair> generate_dataset(const DatasetSpec& spec, const SeveritySampler& severity,
                                         const MaskSampler& mask);

// Voronoi cells around n_regions seeded sites, labels 1..n_regions; voxels
// whose source value is below 0.05 are background (0). Names "region_k".
LabelMap3D generate_labelmap(const PhantomSpec& spec, std::size_t n_regions);

// Two severity groups of subjects sharing one template anatomy. Subject i's
// source is minmax(template + anatomy_jitter * make_source(seed_i)); "real" is
// the oracle target at the subject's severity and "synth" is real plus white
// Gaussian noise at snr_db (signal power = mean squared voxel of real).
struct CohortSpec {
  std::uint64_t seed = 0;
  Dims dims{16, 16, 16};
  std::size_t n_blobs = 6;
  std::size_t n_regions = 8;
  std::size_t n_per_group = 24;
  double severity_a = 0.1;
  double severity_b = 0.9;
  double severity_jitter = 0.05;
  double anatomy_jitter = 0.3;
  double snr_db = 30.0;
  Modality tracer = Modality::a;
};

struct CohortSubject {
  std::string id;
  std::string group;  // "A" or "B"
  double severity = 0.0;
  Volume3D real;
  Volume3D synth;
};

struct Cohort {
  Volume3D template_source;
  LabelMap3D labels;
  std::vector<CohortSubject> subjects;  // group A first, then group B
};

Volume3D oracle_target(Modality m, const Volume3D& source, double severity);
Volume3D add_noise_snr(const Volume3D& v, double snr_db, std::uint64_t seed);
Cohort make_cohort(const CohortSpec& spec);

}  // namespace flowsynth::synth
