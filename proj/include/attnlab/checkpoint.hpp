#pragma once

// Versioned binary model container: magic, version, a JSON header carrying
// config/plan/seed plus a tensor index, then raw little-endian f32 payloads.
// Round-trips bit-exactly.

#include <string>

#include "attnlab/backbone.hpp"

namespace attnlab {

void save_checkpoint(const std::string& path, const Model& model);

// Rebuilds the model the header describes and fills every named tensor.
Model load_checkpoint(const std::string& path);

}  // namespace attnlab
