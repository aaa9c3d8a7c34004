#pragma once

namespace calibtk {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace calibtk
