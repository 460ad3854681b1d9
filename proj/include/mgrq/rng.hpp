#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace mgrq {

// Seeded random stream. The distributions are written out here instead of
// using <random>'s, whose output differs between standard library
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal, Box-Muller.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u;
    do {
      u = next_double();
    } while (u <= 0.0);
    double v = next_double();
    double r = std::sqrt(-2.0 * std::log(u));
    constexpr double kTau = 6.283185307179586476925286766559;
    spare_ = r * std::sin(kTau * v);
    have_spare_ = true;
    return r * std::cos(kTau * v);
  }

  std::vector<double> normal_vector(size_t n, double stddev) {
    std::vector<double> out(n);
    for (auto& x : out) x = stddev * next_normal();
    return out;
  }

  void shuffle(std::vector<size_t>& v) {
    for (size_t i = 0; i + 1 < v.size(); ++i) {
      size_t j = i + static_cast<size_t>(next_below(v.size() - i));
      std::swap(v[i], v[j]);
    }
  }

  // First k entries of a Fisher-Yates shuffle of 0..n-1; every k-subset is
  // equally likely and no index repeats.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n)
      throw std::invalid_argument("sample_without_replacement: k exceeds n");
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(next_below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mgrq
