#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace divot::ad {

// Dense row-major shape. Rank 0 is not used; scalars are shape {1}.
using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace divot::ad
