#pragma once

namespace lefm {

inline constexpr const char* kVersion = "1.0.0";

} // namespace lefm
