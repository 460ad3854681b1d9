#include "mgrq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mgrq/errors.hpp"
#include "mgrq/rng.hpp"

namespace mgrq {

static constexpr char kMagic[8] = {'M', 'G', 'R', 'Q', 'D', 'A', 'T', 'A'};
static constexpr uint32_t kVersion = 1;

void Dataset::validate() const {
  if (channels == 0 || height == 0 || width == 0 || classes == 0)
    throw std::invalid_argument("dataset has a zero dimension");
  if (images.size() != size() * image_bytes())
    throw std::invalid_argument("image payload is " +
                                std::to_string(images.size()) + " bytes for " +
                                std::to_string(size()) + " records");
  for (uint8_t l : labels)
    if (l >= classes)
      throw std::invalid_argument("label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(classes) +
                                  ")");
}

static void put_u32(std::ofstream& out, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16),
                  uint8_t(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

static uint32_t get_u32(const std::vector<uint8_t>& buf, size_t off) {
  return uint32_t(buf[off]) | uint32_t(buf[off + 1]) << 8 |
         uint32_t(buf[off + 2]) << 16 | uint32_t(buf[off + 3]) << 24;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw DataError(DataErrorKind::kNotFound, "cannot open " + path +
                                                  " for writing");
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, uint32_t(ds.split));
  put_u32(out, uint32_t(ds.size()));
  put_u32(out, ds.channels);
  put_u32(out, ds.height);
  put_u32(out, ds.width);
  put_u32(out, ds.classes);
  out.write(reinterpret_cast<const char*>(ds.images.data()),
            std::streamsize(ds.images.size()));
  out.write(reinterpret_cast<const char*>(ds.labels.data()),
            std::streamsize(ds.labels.size()));
  if (!out)
    throw DataError(DataErrorKind::kTruncated, "short write to " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError(DataErrorKind::kNotFound, "no such file: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 8)
    throw DataError(DataErrorKind::kTruncated,
                    path + ": shorter than the magic string");
  if (std::memcmp(buf.data(), kMagic, 8) != 0)
    throw DataError(DataErrorKind::kBadMagic, path + ": not a dataset file");
  if (buf.size() < 8 + 7 * 4)
    throw DataError(DataErrorKind::kTruncated, path + ": header cut short");
  uint32_t version = get_u32(buf, 8);
  if (version != kVersion)
    throw DataError(DataErrorKind::kBadVersion,
                    path + ": version " + std::to_string(version) +
                        ", expected " + std::to_string(kVersion));
  Dataset ds;
  uint32_t split = get_u32(buf, 12);
  if (split > uint32_t(Split::kCalibration))
    throw DataError(DataErrorKind::kCorrupt,
                    path + ": unknown split " + std::to_string(split));
  ds.split = Split(split);
  uint64_t count = get_u32(buf, 16);
  ds.channels = get_u32(buf, 20);
  ds.height = get_u32(buf, 24);
  ds.width = get_u32(buf, 28);
  ds.classes = get_u32(buf, 32);
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0 || ds.classes == 0)
    throw DataError(DataErrorKind::kCorrupt, path + ": zero dimension");
  uint64_t image_bytes =
      count * uint64_t(ds.channels) * ds.height * ds.width;
  uint64_t want = 36 + image_bytes + count;
  if (buf.size() < want)
    throw DataError(DataErrorKind::kTruncated,
                    path + ": payload is " + std::to_string(buf.size() - 36) +
                        " bytes, header promises " +
                        std::to_string(want - 36));
  if (buf.size() > want)
    throw DataError(DataErrorKind::kCorrupt,
                    path + ": " + std::to_string(buf.size() - want) +
                        " trailing bytes");
  ds.images.assign(buf.begin() + 36, buf.begin() + 36 + long(image_bytes));
  ds.labels.assign(buf.begin() + 36 + long(image_bytes), buf.end());
  for (uint8_t l : ds.labels)
    if (l >= ds.classes)
      throw DataError(DataErrorKind::kCorrupt,
                      path + ": label " + std::to_string(l) +
                          " outside [0, " + std::to_string(ds.classes) + ")");
  return ds;
}

// Class c is a sinusoidal grating: c / 2 picks one of five orientations and
// c % 2 picks a low or high contrast. Phase is random, frequency has mild
// jitter, and every pixel gets Gaussian noise, so naming the class takes both
// the orientation and a precise read of the contrast level.
Dataset toy_dataset(Split split, uint64_t seed) {
  if (split == Split::kCalibration)
    throw std::invalid_argument(
        "toy_dataset generates train or test; calibration subsets come from "
        "sample_calibration");
  Dataset ds;
  ds.split = split;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.classes = 10;
  size_t n = split == Split::kTrain ? 5000 : 1000;
  Rng rng(seed + 1000003ull * uint64_t(split));
  ds.images.reserve(n * ds.image_bytes());
  ds.labels.reserve(n);
  constexpr double kTau = 6.283185307179586476925286766559;
  for (size_t i = 0; i < n; ++i) {
    uint8_t label = uint8_t(i % ds.classes);
    ds.labels.push_back(label);
    double theta = kTau / 2.0 * double(label / 2) / 5.0;
    double freq = 2.75 + 0.5 * rng.next_double();
    double phase = kTau * rng.next_double();
    double amp = (label % 2) ? 0.16 : 0.14;
    double cx = std::cos(theta), sx = std::sin(theta);
    std::vector<double> pattern(size_t(ds.height) * ds.width);
    for (uint32_t y = 0; y < ds.height; ++y)
      for (uint32_t x = 0; x < ds.width; ++x)
        pattern[size_t(y) * ds.width + x] =
            0.5 + amp * std::sin(kTau * freq * (x * cx + y * sx) /
                                     double(ds.width) +
                                 phase);
    for (uint32_t ch = 0; ch < ds.channels; ++ch)
      for (size_t p = 0; p < pattern.size(); ++p) {
        double v = pattern[p] + 0.15 * rng.next_normal();
        v = std::clamp(v, 0.0, 1.0);
        ds.images.push_back(uint8_t(std::lround(v * 255.0)));
      }
  }
  return ds;
}

Dataset sample_calibration(const Dataset& ds, size_t count, uint64_t seed) {
  ds.validate();
  if (count > ds.size())
    throw std::invalid_argument("asked for " + std::to_string(count) +
                                " of " + std::to_string(ds.size()) +
                                " records");
  Rng rng(seed);
  std::vector<size_t> idx = rng.sample_without_replacement(ds.size(), count);
  Dataset out;
  out.split = Split::kCalibration;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.classes = ds.classes;
  size_t rec = ds.image_bytes();
  out.images.reserve(count * rec);
  out.labels.reserve(count);
  for (size_t i : idx) {
    out.images.insert(out.images.end(), ds.images.begin() + long(i * rec),
                      ds.images.begin() + long((i + 1) * rec));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

Tensor to_model_input(const Dataset& ds, std::span<const size_t> indices) {
  size_t rec = ds.image_bytes();
  Tensor out = Tensor::zeros({int64_t(indices.size()), int64_t(ds.channels),
                              int64_t(ds.height), int64_t(ds.width)});
  auto& ov = out.values();
  for (size_t b = 0; b < indices.size(); ++b) {
    size_t i = indices[b];
    if (i >= ds.size())
      throw std::invalid_argument("record " + std::to_string(i) +
                                  " outside dataset of " +
                                  std::to_string(ds.size()));
    for (size_t p = 0; p < rec; ++p)
      ov[b * rec + p] = double(ds.images[i * rec + p]) / 255.0;
  }
  return out;
}

std::vector<int32_t> gather_labels(const Dataset& ds,
                                   std::span<const size_t> indices) {
  std::vector<int32_t> out;
  out.reserve(indices.size());
  for (size_t i : indices) {
    if (i >= ds.size())
      throw std::invalid_argument("record " + std::to_string(i) +
                                  " outside dataset of " +
                                  std::to_string(ds.size()));
    out.push_back(int32_t(ds.labels[i]));
  }
  return out;
}

}  // namespace mgrq
