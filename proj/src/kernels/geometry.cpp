#include <omp.h>

#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"

namespace flowsynth::kernels {

ConvGeom ConvGeom::make(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                        std::size_t pad, std::size_t id, std::size_t ih, std::size_t iw) {
  if (k == 0 || stride == 0) throw Error(Errc::shape_mismatch, "conv kernel and stride must be positive");
  if (id + 2 * pad < k || ih + 2 * pad < k || iw + 2 * pad < k) {
    throw Error(Errc::shape_mismatch, "conv kernel larger than padded input");
  }
  ConvGeom g;
  g.ci = ci;
  g.co = co;
  g.k = k;
  g.stride = stride;
  g.pad = pad;
  g.id = id;
  g.ih = ih;
  g.iw = iw;
  g.od = (id + 2 * pad - k) / stride + 1;
  g.oh = (ih + 2 * pad - k) / stride + 1;
  g.ow = (iw + 2 * pad - k) / stride + 1;
  return g;
}

void set_thread_count(int n) {
  if (n > 0) {
    omp_set_num_threads(n);
  } else {
    omp_set_num_threads(omp_get_num_procs());
  }
}

int thread_count() { return omp_get_max_threads(); }

}  // namespace flowsynth::kernels
