#include "flowsynth/modality.hpp"

#include "flowsynth/error.hpp"

namespace flowsynth {

std::string to_string(Modality m) { return m == Modality::f ? "f" : "a"; }

Modality parse_modality(const std::string& text) {
  if (text == "f") return Modality::f;
  if (text == "a") return Modality::a;
  throw Error(Errc::bad_argument, "modality must be 'f' or 'a', got '" + text + "'");
}

}  // namespace flowsynth
