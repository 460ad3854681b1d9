#pragma once

#include <cstdint>
#include <vector>

#include "mgrq/tensor.hpp"

namespace mgrq {

// Uniform affine quantization parameters. axis < 0 means a single
// (scale, zero_point) pair for the whole tensor; axis >= 0 means one pair per
// slice along that axis.
struct QuantParams {
  int bits = 8;
  int axis = -1;
  std::vector<double> scale;
  std::vector<int32_t> zero_point;

  // Top code value, 2^bits - 1.
  int64_t qmax() const { return (int64_t{1} << bits) - 1; }
  void validate() const;
};

struct QuantizedTensor {
  std::vector<int64_t> shape;
  std::vector<uint8_t> codes;
  QuantParams params;
};

// Round to nearest, ties to even. Independent of the FPU rounding mode.
double round_half_even(double x);

// Builds params for the range [lo, hi]:
//   scale = (hi - lo) / (2^bits - 1), clamped below at 1e-8
//   zero_point = round(-lo / scale), clipped to [0, 2^bits - 1]
QuantParams quant_params_from_range(double lo, double hi, int bits);

// Min/max calibration over the whole tensor.
QuantParams calibrate(const Tensor& x, int bits);

// One (scale, zero_point) per slice along axis.
QuantParams calibrate_per_channel(const Tensor& w, int bits, int axis);

// codes = clip(round(x / scale) + zero_point, 0, 2^bits - 1)
QuantizedTensor quantize(const Tensor& x, const QuantParams& qp);

// x = scale * (code - zero_point)
Tensor dequantize(const QuantizedTensor& q);

// Quantize-dequantize in one step. Differentiable via the straight-through
// estimator: gradient passes unchanged where x lies inside the representable
// range [scale * (0 - z), scale * (qmax - z)] and is zero outside.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

// Clip-only variant: the forward clamps to the representable range without
// rounding; the backward is identical to fake_quant. This is the smooth
// function the straight-through estimator differentiates, used as a gradient
// reference path.
Tensor fake_quant_surrogate(const Tensor& x, const QuantParams& qp);

}  // namespace mgrq
