#pragma once

#include <map>
#include <string>
#include <vector>

#include "divot/param.hpp"

// Model checkpoint files ("DVCK"): a small string-valued metadata section
// followed by every parameter as raw little-endian float32, in registration
// order. Writing the same trained state twice produces identical bytes,
// which the determinism checks rely on.

namespace divot::io {

using Meta = std::map<std::string, std::string>;

void save_checkpoint(const std::string& path, const std::vector<ad::Param<float>*>& params, const Meta& meta);

// Loads into an existing, identically-structured parameter set: every file
// entry must match a parameter by name and shape, and every parameter must be
// present in the file. Returns the metadata section.
Meta load_checkpoint(const std::string& path, const std::vector<ad::Param<float>*>& params);

// Reads only the metadata section (cheap; used to route "which model is this").
Meta peek_checkpoint_meta(const std::string& path);

}  // namespace divot::io
