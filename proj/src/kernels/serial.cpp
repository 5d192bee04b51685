#include <cmath>

#include "flowsynth/kernels.hpp"
#include "kernels/ssim_window.hpp"

namespace flowsynth::kernels::serial {

namespace {

// Input coordinate hit by output position o and tap kk, or -1 when it falls in padding.
std::ptrdiff_t tap(std::size_t o, std::size_t kk, const ConvGeom& g, std::size_t extent) {
  const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o * g.stride + kk) - static_cast<std::ptrdiff_t>(g.pad);
  return (i >= 0 && i < static_cast<std::ptrdiff_t>(extent)) ? i : -1;
}

}  // namespace

void conv3d_forward(const ConvGeom& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, std::span<double> out) {
  const std::size_t k3 = g.k * g.k * g.k;
  for (std::size_t co = 0; co < g.co; ++co) {
    for (std::size_t oz = 0; oz < g.od; ++oz) {
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < g.ci; ++ci) {
            for (std::size_t kz = 0; kz < g.k; ++kz) {
              const auto iz = tap(oz, kz, g, g.id);
              if (iz < 0) continue;
              for (std::size_t ky = 0; ky < g.k; ++ky) {
                const auto iy = tap(oy, ky, g, g.ih);
                if (iy < 0) continue;
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                  const auto ix = tap(ox, kx, g, g.iw);
                  if (ix < 0) continue;
                  const double wv = w[(co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k + kx];
                  acc += wv * in[((ci * g.id + iz) * g.ih + iy) * g.iw + ix];
                }
              }
            }
          }
          const double b = bias.empty() ? 0.0 : bias[co];
          out[((co * g.od + oz) * g.oh + oy) * g.ow + ox] = b + acc;
        }
      }
    }
  }
}

void conv3d_backward_input(const ConvGeom& g, std::span<const double> gout, std::span<const double> w,
                           std::span<double> gin) {
  const std::size_t k3 = g.k * g.k * g.k;
  for (std::size_t ci = 0; ci < g.ci; ++ci) {
    for (std::size_t iz = 0; iz < g.id; ++iz) {
      for (std::size_t iy = 0; iy < g.ih; ++iy) {
        for (std::size_t ix = 0; ix < g.iw; ++ix) {
          double acc = 0.0;
          for (std::size_t co = 0; co < g.co; ++co) {
            for (std::size_t kz = 0; kz < g.k; ++kz) {
              const std::ptrdiff_t nz = static_cast<std::ptrdiff_t>(iz + g.pad) - static_cast<std::ptrdiff_t>(kz);
              if (nz < 0 || nz % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
              const std::size_t oz = static_cast<std::size_t>(nz) / g.stride;
              if (oz >= g.od) continue;
              for (std::size_t ky = 0; ky < g.k; ++ky) {
                const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(iy + g.pad) - static_cast<std::ptrdiff_t>(ky);
                if (ny < 0 || ny % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                const std::size_t oy = static_cast<std::size_t>(ny) / g.stride;
                if (oy >= g.oh) continue;
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                  const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(ix + g.pad) - static_cast<std::ptrdiff_t>(kx);
                  if (nx < 0 || nx % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                  const std::size_t ox = static_cast<std::size_t>(nx) / g.stride;
                  if (ox >= g.ow) continue;
                  acc += w[(co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k + kx] *
                         gout[((co * g.od + oz) * g.oh + oy) * g.ow + ox];
                }
              }
            }
          }
          gin[((ci * g.id + iz) * g.ih + iy) * g.iw + ix] += acc;
        }
      }
    }
  }
}

void conv3d_backward_weight(const ConvGeom& g, std::span<const double> in, std::span<const double> gout,
                            std::span<double> gw, std::span<double> gbias) {
  const std::size_t k3 = g.k * g.k * g.k;
  const std::size_t out_sites = g.od * g.oh * g.ow;
  for (std::size_t co = 0; co < g.co; ++co) {
    for (std::size_t ci = 0; ci < g.ci; ++ci) {
      for (std::size_t kz = 0; kz < g.k; ++kz) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            double acc = 0.0;
            for (std::size_t oz = 0; oz < g.od; ++oz) {
              const auto iz = tap(oz, kz, g, g.id);
              if (iz < 0) continue;
              for (std::size_t oy = 0; oy < g.oh; ++oy) {
                const auto iy = tap(oy, ky, g, g.ih);
                if (iy < 0) continue;
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                  const auto ix = tap(ox, kx, g, g.iw);
                  if (ix < 0) continue;
                  acc += gout[((co * g.od + oz) * g.oh + oy) * g.ow + ox] *
                         in[((ci * g.id + iz) * g.ih + iy) * g.iw + ix];
                }
              }
            }
            gw[(co * g.ci + ci) * k3 + (kz * g.k + ky) * g.k + kx] += acc;
          }
        }
      }
    }
    if (!gbias.empty()) {
      double acc = 0.0;
      for (std::size_t s = 0; s < out_sites; ++s) acc += gout[co * out_sites + s];
      gbias[co] += acc;
    }
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

void layer_norm_forward(std::size_t channels, std::size_t sites, std::span<const double> x,
                        std::span<const double> gain, std::span<const double> bias, double eps,
                        std::span<double> y, std::span<double> xhat, std::span<double> rstd) {
  const double inv_c = 1.0 / static_cast<double>(channels);
  for (std::size_t s = 0; s < sites; ++s) {
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
    for (std::size_t s = 0; s < sites; ++s) {
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
  for (std::size_t c = 0; c < channels; ++c) {
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
  for (std::size_t z = 0; z < pz; ++z) {
    for (std::size_t y = 0; y < py; ++y) {
      for (std::size_t x = 0; x < px; ++x) {
        out[x + px * (y + py * z)] = detail::ssim_window(nx, ny, window, a, b, c1, c2, x, y, z);
      }
    }
  }
}

}  // namespace flowsynth::kernels::serial
