#pragma once

namespace mfpp {

inline constexpr const char* kVersion = "0.1.0";

} // namespace mfpp
