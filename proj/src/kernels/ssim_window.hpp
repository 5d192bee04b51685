#pragma once

#include <cstddef>
#include <span>

namespace flowsynth::kernels::detail {

// Local SSIM of the w^3 window whose low corner is (x0, y0, z0).
inline double ssim_window(std::size_t nx, std::size_t ny, std::size_t w, std::span<const double> a,
                          std::span<const double> b, double c1, double c2, std::size_t x0, std::size_t y0,
                          std::size_t z0) {
  double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t z = z0; z < z0 + w; ++z) {
    for (std::size_t y = y0; y < y0 + w; ++y) {
      const std::size_t row = nx * (y + ny * z);
      for (std::size_t x = x0; x < x0 + w; ++x) {
        const double u = a[row + x];
        const double v = b[row + x];
        sa += u;
        sb += v;
        saa += u * u;
        sbb += v * v;
        sab += u * v;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(w * w * w);
  const double ma = sa * inv, mb = sb * inv;
  const double va = saa * inv - ma * ma;
  const double vb = sbb * inv - mb * mb;
  const double cov = sab * inv - ma * mb;
  return ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

}  // namespace flowsynth::kernels::detail
