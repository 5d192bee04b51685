#include "flowsynth/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "flowsynth/error.hpp"
#include "flowsynth/rng.hpp"
#include "parallel.hpp"

namespace flowsynth::synth {

namespace {

constexpr std::uint64_t kLabelStream = 0x4C424C31;  // "LBL1"
constexpr std::uint64_t kSynthStream = 0x53594E54;  // "SYNT"
constexpr double kBackground = 0.05;

void require_grid(Dims dims) {
  if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) {
    throw Error(Errc::bad_dims, "phantom dims must be >= 8 per axis, got " + to_string(dims));
  }
}

void require_severity(double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw Error(Errc::bad_argument, "severity must lie in [0, 1]");
}

Volume3D normalized(Dims dims, const std::vector<double>& values) {
  return minmax_normalize(Volume3D::from_doubles(dims, values));
}

}  // namespace

Volume3D make_source(std::uint64_t seed, Dims dims, std::size_t n_blobs) {
  require_grid(dims);
  if (n_blobs == 0) throw Error(Errc::bad_argument, "n_blobs must be >= 1");
  SplitMix64 rng(seed);
  struct Blob {
    double cx, cy, cz, inv2s2, amp;
  };
  const double mean_extent = (dims.nx + dims.ny + dims.nz) / 3.0;
  std::vector<Blob> blobs(n_blobs);
  for (auto& b : blobs) {
    b.cx = rng.uniform(0.2, 0.8) * (dims.nx - 1);
    b.cy = rng.uniform(0.2, 0.8) * (dims.ny - 1);
    b.cz = rng.uniform(0.2, 0.8) * (dims.nz - 1);
    const double sigma = rng.uniform(0.08, 0.25) * mean_extent;
    b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
    b.amp = rng.uniform(0.5, 1.0);
  }
  std::vector<double> v(dims.count(), 0.0);
  std::size_t i = 0;
  for (std::uint32_t z = 0; z < dims.nz; ++z) {
    for (std::uint32_t y = 0; y < dims.ny; ++y) {
      for (std::uint32_t x = 0; x < dims.nx; ++x, ++i) {
        double s = 0.0;
        for (const auto& b : blobs) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy) + (z - b.cz) * (z - b.cz);
          s += b.amp * std::exp(-d2 * b.inv2s2);
        }
        v[i] = s;
      }
    }
  }
  return normalized(dims, v);
}

Volume3D box_smooth3(const Volume3D& v) {
  const Dims d = v.dims();
  const auto src = v.voxels();
  auto clamp = [](long i, std::uint32_t n) { return static_cast<std::size_t>(std::clamp<long>(i, 0, n - 1)); };
  std::vector<double> out(d.count());
  std::size_t i = 0;
  for (long z = 0; z < d.nz; ++z) {
    for (long y = 0; y < d.ny; ++y) {
      for (long x = 0; x < d.nx; ++x, ++i) {
        double s = 0.0;
        for (long dz = -1; dz <= 1; ++dz) {
          for (long dy = -1; dy <= 1; ++dy) {
            for (long dx = -1; dx <= 1; ++dx) {
              s += src[v.index(clamp(x + dx, d.nx), clamp(y + dy, d.ny), clamp(z + dz, d.nz))];
            }
          }
        }
        out[i] = s / 27.0;
      }
    }
  }
  return Volume3D::from_doubles(d, out);
}

Volume3D oracle_f(const Volume3D& source, double severity) {
  require_severity(severity);
  const auto smooth = box_smooth3(source);
  const auto s = source.voxels();
  const auto b = smooth.voxels();
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (1.0 - 0.5 * severity) * s[i] + 0.2 * severity * b[i];
  return normalized(source.dims(), out);
}

Volume3D oracle_a(const Volume3D& source, double severity) {
  require_severity(severity);
  const auto s = source.voxels();
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = std::pow(static_cast<double>(s[i]), 1.0 + severity);
  return normalized(source.dims(), out);
}

SamplePair generate_sample(const PhantomSpec& spec) {
  require_severity(spec.severity);
  SamplePair p;
  p.seed = spec.seed;
  p.severity = spec.severity;
  p.source = make_source(spec.seed, spec.dims, spec.n_blobs);
  p.delta_f = spec.delta_f;
  p.delta_a = spec.delta_a;
  if (spec.delta_f) p.target_f = oracle_f(p.source, spec.severity);
  if (spec.delta_a) p.target_a = oracle_a(p.source, spec.severity);
  return p;
}

SeveritySampler uniform_severity(std::uint64_t seed, double lo, double hi) {
  return [=](std::size_t i) {
    SplitMix64 rng(derive_seed(seed, i));
    return rng.uniform(lo, hi);
  };
}

SeveritySampler cyclic_severity(std::vector<double> levels) {
  if (levels.empty()) throw Error(Errc::bad_argument, "cyclic_severity needs at least one level");
  return [levels = std::move(levels)](std::size_t i) { return levels[i % levels.size()]; };
}

MaskSampler full_mask() {
  return [](std::size_t) { return std::pair{true, true}; };
}

MaskSampler random_mask(std::uint64_t seed, double p_f, double p_a) {
  return [=](std::size_t i) {
    SplitMix64 rng(derive_seed(seed, i));
    bool f = rng.uniform() < p_f;
    bool a = rng.uniform() < p_a;
    if (!f && !a) (rng.uniform() < 0.5 ? f : a) = true;
    return std::pair{f, a};
  };
}

std::vector<SamplePair> generate_dataset(const DatasetSpec& spec, const SeveritySampler& severity,
                                         const MaskSampler& mask) {
  if (spec.n == 0) throw Error(Errc::bad_argument, "dataset size must be >= 1");
  std::vector<SamplePair> out(spec.n);
  detail::parallel_for(spec.n, [&](std::size_t i) {
    const auto [f, a] = mask(i);
    out[i] = generate_sample({spec.base_seed + i, spec.dims, spec.n_blobs, severity(i), f, a});
  });
  return out;
}

LabelMap3D generate_labelmap(const PhantomSpec& spec, std::size_t n_regions) {
  if (n_regions < 2 || n_regions > 0xFFFF) throw Error(Errc::bad_argument, "n_regions must lie in [2, 65535]");
  const auto source = make_source(spec.seed, spec.dims, spec.n_blobs);
  const Dims d = spec.dims;
  SplitMix64 rng(derive_seed(spec.seed, kLabelStream));
  std::vector<std::array<double, 3>> sites(n_regions);
  for (auto& s : sites) s = {rng.uniform() * (d.nx - 1), rng.uniform() * (d.ny - 1), rng.uniform() * (d.nz - 1)};

  LabelMap3D out;
  out.dims = d;
  out.labels.assign(d.count(), 0);
  std::size_t i = 0;
  for (std::uint32_t z = 0; z < d.nz; ++z) {
    for (std::uint32_t y = 0; y < d.ny; ++y) {
      for (std::uint32_t x = 0; x < d.nx; ++x, ++i) {
        if (source.voxels()[i] < kBackground) continue;
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t r = 0; r < n_regions; ++r) {
          const double d2 = (x - sites[r][0]) * (x - sites[r][0]) + (y - sites[r][1]) * (y - sites[r][1]) +
                            (z - sites[r][2]) * (z - sites[r][2]);
          if (d2 < best) best = d2, arg = r;
        }
        out.labels[i] = static_cast<std::uint16_t>(arg + 1);
      }
    }
  }
  for (std::size_t r = 1; r <= n_regions; ++r) out.region_names[static_cast<std::uint16_t>(r)] = "region_" + std::to_string(r);
  return out;
}

Volume3D oracle_target(Modality m, const Volume3D& source, double severity) {
  return m == Modality::f ? oracle_f(source, severity) : oracle_a(source, severity);
}

Volume3D add_noise_snr(const Volume3D& v, double snr_db, std::uint64_t seed) {
  double power = 0.0;
  for (float x : v.voxels()) power += double(x) * x;
  power /= static_cast<double>(v.size());
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  SplitMix64 rng(seed);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v.voxels()[i] + sigma * rng.normal();
  return Volume3D::from_doubles(v.dims(), out);
}

Cohort make_cohort(const CohortSpec& spec) {
  require_grid(spec.dims);
  if (spec.n_per_group < 2) throw Error(Errc::bad_argument, "n_per_group must be >= 2");
  require_severity(spec.severity_a);
  require_severity(spec.severity_b);
  Cohort out;
  out.template_source = make_source(spec.seed, spec.dims, spec.n_blobs);
  out.labels = generate_labelmap({spec.seed, spec.dims, spec.n_blobs}, spec.n_regions);
  out.subjects.resize(2 * spec.n_per_group);

  detail::parallel_for(out.subjects.size(), [&](std::size_t i) {
    const bool b = i >= spec.n_per_group;
    const std::uint64_t seed = derive_seed(spec.seed, i + 1);
    SplitMix64 rng(seed);
    const double centre = b ? spec.severity_b : spec.severity_a;
    const double sev = std::clamp(centre + spec.severity_jitter * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);

    const auto jitter = make_source(derive_seed(seed, 0), spec.dims, spec.n_blobs);
    std::vector<double> src(out.template_source.size());
    for (std::size_t k = 0; k < src.size(); ++k) {
      src[k] = out.template_source.voxels()[k] + spec.anatomy_jitter * jitter.voxels()[k];
    }
    auto& s = out.subjects[i];
    s.id = (b ? "B" : "A") + std::to_string(b ? i - spec.n_per_group : i);
    s.group = b ? "B" : "A";
    s.severity = sev;
    s.real = oracle_target(spec.tracer, normalized(spec.dims, src), sev);
    s.synth = add_noise_snr(s.real, spec.snr_db, derive_seed(seed, kSynthStream));
  });
  return out;
}

}  // namespace flowsynth::synth
