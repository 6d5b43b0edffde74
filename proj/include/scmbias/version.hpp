#pragma once

namespace scmbias {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace scmbias
