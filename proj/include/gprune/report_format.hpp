#pragma once

#include <cstdio>
#include <string>

namespace gprune {

// Round-trippable, locale-independent formatting for report files.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace gprune
