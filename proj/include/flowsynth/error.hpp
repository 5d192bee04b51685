#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace flowsynth {

enum class Errc {
  constant_volume,
  bad_magic,
  bad_header,
  dim_mismatch,
  truncated_file,
  io_failure,
  bad_dims,
  shape_mismatch,
  non_finite,
  not_scalar_loss,
  empty_tape,
  missing_grad,
  zero_vector,
  out_of_range_t,
  empty_batch,
  too_small,
  empty_region,
  zero_reference,
  degenerate_variance,
  bad_p,
  bad_config,
  bad_argument,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace flowsynth
