#include <algorithm>
#include <cmath>
#include <vector>

#include "flowsynth/kernels.hpp"
#include "kernels/ssim_window.hpp"

// Same per-element summation order as kernels::serial; the loops are only
// rearranged so a row of outputs accumulates together.
namespace flowsynth::kernels::omp {

namespace {

using Index = std::ptrdiff_t;

// Taps kk in [lo, hi) for which o * stride + kk - pad lands inside [0, extent).
struct TapRange {
  std::size_t lo, hi;
};

TapRange taps(std::size_t o, const ConvGeom& g, std::size_t extent) {
  const Index base = static_cast<Index>(o * g.stride) - static_cast<Index>(g.pad);
  const Index lo = std::max<Index>(0, -base);
  const Index hi = std::min<Index>(static_cast<Index>(g.k), static_cast<Index>(extent) - base);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Outputs o in [lo, hi) for which o * stride + kk - pad lands inside [0, extent).
TapRange outputs_for_tap(std::size_t kk, const ConvGeom& g, std::size_t extent, std::size_t out_extent) {
  const Index s = static_cast<Index>(g.stride);
  const Index shift = static_cast<Index>(kk) - static_cast<Index>(g.pad);
  const Index lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  const Index last = static_cast<Index>(extent) - 1 - shift;
  if (last < 0) return {0, 0};
  const Index hi = std::min<Index>(static_cast<Index>(out_extent), last / s + 1);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

std::vector<TapRange> x_taps(const ConvGeom& g) {
  std::vector<TapRange> out(g.k);
  for (std::size_t kx = 0; kx < g.k; ++kx) out[kx] = outputs_for_tap(kx, g, g.iw, g.ow);
  return out;
}

}  // namespace

void conv3d_forward(const ConvGeom& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, std::span<double> out) {
  const std::size_t k3 = g.k * g.k * g.k;
  const auto xr = x_taps(g);
  const Index planes = static_cast<Index>(g.co * g.od);
#pragma omp parallel
  {
    std::vector<double> acc(g.ow);
#pragma omp for schedule(static)
    for (Index plane = 0; plane < planes; ++plane) {
      const std::size_t co = static_cast<std::size_t>(plane) / g.od;
      const std::size_t oz = static_cast<std::size_t>(plane) % g.od;
      const TapRange rz = taps(oz, g, g.id);
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        const TapRange ry = taps(oy, g, g.ih);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t ci = 0; ci < g.ci; ++ci) {
          for (std::size_t kz = rz.lo; kz < rz.hi; ++kz) {
            const std::size_t iz = oz * g.stride + kz - g.pad;
            for (std::size_t ky = ry.lo; ky < ry.hi; ++ky) {
              const std::size_t iy = oy * g.stride + ky - g.pad;
              const double* row = in.data() + ((ci * g.id + iz) * g.ih + iy) * g.iw;
              const double* wrow = w.data() + (co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const TapRange rx = xr[kx];
                const double wv = wrow[kx];
                const Index off = static_cast<Index>(kx) - static_cast<Index>(g.pad);
                if (g.stride == 1) {
                  for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) acc[ox] += wv * row[ox + off];
                } else {
                  for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) acc[ox] += wv * row[ox * g.stride + off];
                }
              }
            }
          }
        }
        const double b = bias.empty() ? 0.0 : bias[co];
        double* orow = out.data() + ((co * g.od + oz) * g.oh + oy) * g.ow;
        for (std::size_t ox = 0; ox < g.ow; ++ox) orow[ox] = b + acc[ox];
      }
    }
  }
}

void conv3d_backward_input(const ConvGeom& g, std::span<const double> gout, std::span<const double> w,
                           std::span<double> gin) {
  const std::size_t k3 = g.k * g.k * g.k;
  const auto xr = x_taps(g);
  const Index planes = static_cast<Index>(g.ci * g.id);
  const Index stride = static_cast<Index>(g.stride);
#pragma omp parallel
  {
    std::vector<double> acc(g.iw);
#pragma omp for schedule(static)
    for (Index plane = 0; plane < planes; ++plane) {
      const std::size_t ci = static_cast<std::size_t>(plane) / g.id;
      const std::size_t iz = static_cast<std::size_t>(plane) % g.id;
      for (std::size_t iy = 0; iy < g.ih; ++iy) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t co = 0; co < g.co; ++co) {
          for (std::size_t kz = 0; kz < g.k; ++kz) {
            const Index nz = static_cast<Index>(iz + g.pad) - static_cast<Index>(kz);
            if (nz < 0 || nz % stride != 0 || static_cast<std::size_t>(nz / stride) >= g.od) continue;
            const std::size_t oz = static_cast<std::size_t>(nz / stride);
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const Index ny = static_cast<Index>(iy + g.pad) - static_cast<Index>(ky);
              if (ny < 0 || ny % stride != 0 || static_cast<std::size_t>(ny / stride) >= g.oh) continue;
              const std::size_t oy = static_cast<std::size_t>(ny / stride);
              const double* grow = gout.data() + ((co * g.od + oz) * g.oh + oy) * g.ow;
              const double* wrow = w.data() + (co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                // gin[ix] += w[kx] * gout[ox] with ix = ox * stride + kx - pad
                const TapRange rx = xr[kx];
                const double wv = wrow[kx];
                const Index off = static_cast<Index>(kx) - static_cast<Index>(g.pad);
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) acc[ox * g.stride + off] += wv * grow[ox];
              }
            }
          }
        }
        double* dst = gin.data() + ((ci * g.id + iz) * g.ih + iy) * g.iw;
        for (std::size_t ix = 0; ix < g.iw; ++ix) dst[ix] += acc[ix];
      }
    }
  }
}

void conv3d_backward_weight(const ConvGeom& g, std::span<const double> in, std::span<const double> gout,
                            std::span<double> gw, std::span<double> gbias) {
  const std::size_t k3 = g.k * g.k * g.k;
  const auto xr = x_taps(g);
  const std::size_t out_sites = g.od * g.oh * g.ow;
  const Index pairs = static_cast<Index>(g.co * g.ci);
#pragma omp parallel
  {
    std::vector<double> acc(g.k);
#pragma omp for schedule(static)
    for (Index pair = 0; pair < pairs; ++pair) {
      const std::size_t co = static_cast<std::size_t>(pair) / g.ci;
      const std::size_t ci = static_cast<std::size_t>(pair) % g.ci;
      for (std::size_t kz = 0; kz < g.k; ++kz) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t oz = 0; oz < g.od; ++oz) {
            const Index iz = static_cast<Index>(oz * g.stride + kz) - static_cast<Index>(g.pad);
            if (iz < 0 || iz >= static_cast<Index>(g.id)) continue;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const Index iy = static_cast<Index>(oy * g.stride + ky) - static_cast<Index>(g.pad);
              if (iy < 0 || iy >= static_cast<Index>(g.ih)) continue;
              const double* grow = gout.data() + ((co * g.od + oz) * g.oh + oy) * g.ow;
              const double* row = in.data() + ((ci * g.id + static_cast<std::size_t>(iz)) * g.ih +
                                               static_cast<std::size_t>(iy)) * g.iw;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const TapRange rx = xr[kx];
                const Index off = static_cast<Index>(kx) - static_cast<Index>(g.pad);
                double a = acc[kx];
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) a += grow[ox] * row[ox * g.stride + off];
                acc[kx] = a;
              }
            }
          }
          double* dst = gw.data() + (co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k;
          for (std::size_t kx = 0; kx < g.k; ++kx) dst[kx] += acc[kx];
        }
      }
    }
  }
  if (!gbias.empty()) {
#pragma omp parallel for schedule(static)
    for (Index co = 0; co < static_cast<Index>(g.co); ++co) {
      double acc = 0.0;
      for (std::size_t s = 0; s < out_sites; ++s) acc += gout[static_cast<std::size_t>(co) * out_sites + s];
      gbias[static_cast<std::size_t>(co)] += acc;
    }
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c, bool accumulate) {
#pragma omp parallel
  {
    std::vector<double> acc(n);
#pragma omp for schedule(static)
    for (Index ii = 0; ii < static_cast<Index>(m); ++ii) {
      const std::size_t i = static_cast<std::size_t>(ii);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        if (trans_b) {
          for (std::size_t j = 0; j < n; ++j) acc[j] += av * b[j * k + p];
        } else {
          const double* brow = b.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
        }
      }
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = accumulate ? crow[j] + acc[j] : acc[j];
    }
  }
}

void layer_norm_forward(std::size_t channels, std::size_t sites, std::span<const double> x,
                        std::span<const double> gain, std::span<const double> bias, double eps,
                        std::span<double> y, std::span<double> xhat, std::span<double> rstd) {
  const double inv_c = 1.0 / static_cast<double>(channels);
#pragma omp parallel for schedule(static)
  for (Index si = 0; si < static_cast<Index>(sites); ++si) {
    const std::size_t s = static_cast<std::size_t>(si);
    double mean = 0.0;
    for (std::size_t c = 0; c < channels; ++c) mean += x[c * sites + s];
    mean *= inv_c;
    double var = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double d = x[c * sites + s] - mean;
      var += d * d;
    }
    var *= inv_c;
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[s] = r;
    for (std::size_t c = 0; c < channels; ++c) {
      const double h = (x[c * sites + s] - mean) * r;
      xhat[c * sites + s] = h;
      y[c * sites + s] = gain[c] * h + bias[c];
    }
  }
}

void layer_norm_backward(std::size_t channels, std::size_t sites, std::span<const double> gy,
                         std::span<const double> xhat, std::span<const double> rstd,
                         std::span<const double> gain, std::span<double> gx, std::span<double> ggain,
                         std::span<double> gbias) {
  const double inv_c = 1.0 / static_cast<double>(channels);
  if (!gx.empty()) {
#pragma omp parallel for schedule(static)
    for (Index si = 0; si < static_cast<Index>(sites); ++si) {
      const std::size_t s = static_cast<std::size_t>(si);
      double mean_g = 0.0;
      double mean_gh = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double gh = gy[c * sites + s] * gain[c];
        mean_g += gh;
        mean_gh += gh * xhat[c * sites + s];
      }
      mean_g *= inv_c;
      mean_gh *= inv_c;
      for (std::size_t c = 0; c < channels; ++c) {
        const double gh = gy[c * sites + s] * gain[c];
        gx[c * sites + s] += rstd[s] * (gh - mean_g - xhat[c * sites + s] * mean_gh);
      }
    }
  }
#pragma omp parallel for schedule(static)
  for (Index ci = 0; ci < static_cast<Index>(channels); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    double ag = 0.0;
    double ab = 0.0;
    for (std::size_t s = 0; s < sites; ++s) {
      ag += gy[c * sites + s] * xhat[c * sites + s];
      ab += gy[c * sites + s];
    }
    if (!ggain.empty()) ggain[c] += ag;
    if (!gbias.empty()) gbias[c] += ab;
  }
}

void ssim_map(std::size_t nx, std::size_t ny, std::size_t nz, std::size_t window,
              std::span<const double> a, std::span<const double> b, double c1, double c2,
              std::span<double> out) {
  const std::size_t px = nx - window + 1, py = ny - window + 1, pz = nz - window + 1;
#pragma omp parallel for schedule(static)
  for (std::size_t z = 0; z < pz; ++z) {
    for (std::size_t y = 0; y < py; ++y) {
      for (std::size_t x = 0; x < px; ++x) {
        out[x + px * (y + py * z)] = detail::ssim_window(nx, ny, window, a, b, c1, c2, x, y, z);
      }
    }
  }
}

}  // namespace flowsynth::kernels::omp
