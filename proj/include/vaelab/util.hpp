#pragma once

#include <cstdio>
#include <string>

namespace vaelab {

// 17 significant digits: enough to round-trip a 64-bit float exactly.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace vaelab
