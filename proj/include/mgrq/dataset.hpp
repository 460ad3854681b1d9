#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mgrq/tensor.hpp"

namespace mgrq {

enum class Split : uint32_t {
  kTrain = 0,
  kTest = 1,
  kCalibration = 2,
};

// Labeled uint8 image set. Images are packed [n, channels, height, width].
struct Dataset {
  Split split = Split::kTrain;
  uint32_t channels = 0;
  uint32_t height = 0;
  uint32_t width = 0;
  uint32_t classes = 0;

  std::vector<uint8_t> images;
  std::vector<uint8_t> labels;

  size_t size() const { return labels.size(); }
  size_t image_bytes() const {
    return size_t(channels) * height * width;
  }
  void validate() const;
};

// Single-file container, little-endian:
//   8 bytes  magic "MGRQDATA"
//   u32      version (currently 1)
//   u32      split
//   u32      record count
//   u32      channels
//   u32      height
//   u32      width
//   u32      class count
//   bytes    count * channels * height * width image payload
//   bytes    count label payload
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

constexpr uint64_t kToyDataSeed = 71u;

// Deterministic textured toy task: 10 classes of oriented gratings,
// 3x32x32 uint8, 5000 train / 1000 test records.
Dataset toy_dataset(Split split, uint64_t seed = kToyDataSeed);

// Uniform subset without replacement, tagged as calibration data.
Dataset sample_calibration(const Dataset& ds, size_t count, uint64_t seed);

// Stacks records into a [B, C, H, W] tensor scaled to [0, 1].
Tensor to_model_input(const Dataset& ds, std::span<const size_t> indices);
std::vector<int32_t> gather_labels(const Dataset& ds,
                                   std::span<const size_t> indices);

}  // namespace mgrq
