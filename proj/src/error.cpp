#include "flowsynth/error.hpp"

namespace flowsynth {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::constant_volume: return "ConstantVolume";
    case Errc::bad_magic: return "BadMagic";
    case Errc::bad_header: return "BadHeader";
    case Errc::dim_mismatch: return "DimMismatch";
    case Errc::truncated_file: return "TruncatedFile";
    case Errc::io_failure: return "IoFailure";
    case Errc::bad_dims: return "BadDims";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::non_finite: return "NonFinite";
    case Errc::not_scalar_loss: return "NotScalarLoss";
    case Errc::empty_tape: return "EmptyTape";
    case Errc::missing_grad: return "MissingGrad";
    case Errc::zero_vector: return "ZeroVector";
    case Errc::out_of_range_t: return "OutOfRangeT";
    case Errc::empty_batch: return "EmptyBatch";
    case Errc::too_small: return "TooSmall";
    case Errc::empty_region: return "EmptyRegion";
    case Errc::zero_reference: return "ZeroReference";
    case Errc::degenerate_variance: return "DegenerateVariance";
    case Errc::bad_p: return "BadP";
    case Errc::bad_config: return "BadConfig";
    case Errc::bad_argument: return "BadArgument";
  }
  return "Unknown";
}

}  // namespace flowsynth
