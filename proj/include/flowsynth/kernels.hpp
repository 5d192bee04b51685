#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the diffcore ops. Every kernel exists twice: `serial`
// is the reference used by tests, `omp` is the OpenMP version the ops call.
// Each output element is reduced by exactly one thread in the same order as
// the serial loop, so both variants are bit-identical for any thread count.
// Backward kernels accumulate (+=) into their outputs.
namespace flowsynth::kernels {

struct ConvGeom {
  std::size_t ci = 0, co = 0;
  std::size_t k = 0, stride = 1, pad = 0;
  std::size_t id = 0, ih = 0, iw = 0;
  std::size_t od = 0, oh = 0, ow = 0;

  // Output extent (in + 2 pad - k) / stride + 1 per axis.
  static ConvGeom make(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                       std::size_t pad, std::size_t id, std::size_t ih, std::size_t iw);
  std::size_t in_size() const { return ci * id * ih * iw; }
  std::size_t out_size() const { return co * od * oh * ow; }
  std::size_t weight_size() const { return co * ci * k * k * k; }
};

#define FLOWSYNTH_KERNEL_DECLS                                                                  \
  void conv3d_forward(const ConvGeom& g, std::span<const double> in, std::span<const double> w, \
                      std::span<const double> bias, std::span<double> out);                     \
  void conv3d_backward_input(const ConvGeom& g, std::span<const double> gout,                   \
                             std::span<const double> w, std::span<double> gin);                 \
  void conv3d_backward_weight(const ConvGeom& g, std::span<const double> in,                    \
                              std::span<const double> gout, std::span<double> gw,               \
                              std::span<double> gbias);                                         \
  void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,            \
            std::span<const double> a, std::span<const double> b, std::span<double> c,          \
            bool accumulate);                                                                   \
  void layer_norm_forward(std::size_t channels, std::size_t sites, std::span<const double> x,   \
                          std::span<const double> gain, std::span<const double> bias,           \
                          double eps, std::span<double> y, std::span<double> xhat,              \
                          std::span<double> rstd);                                              \
  void layer_norm_backward(std::size_t channels, std::size_t sites, std::span<const double> gy, \
                           std::span<const double> xhat, std::span<const double> rstd,          \
                           std::span<const double> gain, std::span<double> gx,                  \
                           std::span<double> ggain, std::span<double> gbias);              \
  void ssim_map(std::size_t nx, std::size_t ny, std::size_t nz, std::size_t window,             \
                std::span<const double> a, std::span<const double> b, double c1, double c2,     \
                std::span<double> out);

namespace serial {
FLOWSYNTH_KERNEL_DECLS
}
namespace omp {
FLOWSYNTH_KERNEL_DECLS
}

#undef FLOWSYNTH_KERNEL_DECLS

// ssim_map writes the local SSIM of every fully contained window position,
// x fastest, into out[(nx-w+1) * (ny-w+1) * (nz-w+1)].

// Caps OpenMP worker threads; 0 restores the runtime default.
void set_thread_count(int n);
int thread_count();

}  // namespace flowsynth::kernels
