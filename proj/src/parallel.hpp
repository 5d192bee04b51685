#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace flowsynth::detail {

// body(i) for i in [0, n) across the OpenMP team. Exceptions cannot leave an
// OpenMP region, so each is captured and the one from the lowest index is
// rethrown after the loop.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace flowsynth::detail
