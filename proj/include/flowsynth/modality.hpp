#pragma once

#include <cstdint>
#include <string>

namespace flowsynth {

// Target tracer. Also selects the velocity head that is read.
enum class Modality : std::uint8_t { f = 0, a = 1 };

std::string to_string(Modality m);
Modality parse_modality(const std::string& text);

}  // namespace flowsynth
