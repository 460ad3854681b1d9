#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mgrq/vit.hpp"

namespace mgrq {

// Versioned binary model container, little-endian throughout:
//   8 bytes  magic "MGRQCKPT"
//   u32      version (currently 1)
//   u32      run mode
//   u32 x16  model config fields
//   u64      tensor count, then per tensor:
//            u64 name length, name bytes, u64 rank, u64 dims..., f32 payload
//   u64      quant param count, then per entry:
//            u64 name length, name bytes, u32 bits, i32 axis,
//            u64 channel count, f32 scales..., i32 zero points...
//
// Tensor payloads are stored as f32. save(load(p)) reproduces p byte for
// byte; a model freshly loaded from a checkpoint round-trips bit-exactly.
std::vector<uint8_t> serialize_model(const ViTModel& model);
ViTModel deserialize_model(const uint8_t* data, size_t size);

void save_checkpoint(const ViTModel& model, const std::string& path);
ViTModel load_checkpoint(const std::string& path);

}  // namespace mgrq
