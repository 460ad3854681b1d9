#include "mgrq/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mgrq/errors.hpp"

namespace mgrq {

void QuantParams::validate() const {
  if (bits < 2 || bits > 8)
    throw std::invalid_argument("bits must lie in [2, 8], got " +
                                std::to_string(bits));
  if (scale.empty() || scale.size() != zero_point.size())
    throw std::invalid_argument("scale/zero_point size mismatch: " +
                                std::to_string(scale.size()) + " vs " +
                                std::to_string(zero_point.size()));
  if (axis < 0 && scale.size() != 1)
    throw std::invalid_argument("per-tensor params need exactly one scale");
  for (double s : scale)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::invalid_argument("scale must be positive and finite");
  for (int32_t z : zero_point)
    if (z < 0 || int64_t(z) > qmax())
      throw std::invalid_argument("zero_point " + std::to_string(z) +
                                  " outside [0, " + std::to_string(qmax()) +
                                  "]");
}

double round_half_even(double x) {
  double f = std::floor(x);
  double r = x - f;
  if (r > 0.5) return f + 1.0;
  if (r < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

QuantParams quant_params_from_range(double lo, double hi, int bits) {
  if (bits < 2 || bits > 8)
    throw std::invalid_argument("bits must lie in [2, 8], got " +
                                std::to_string(bits));
  if (!std::isfinite(lo) || !std::isfinite(hi))
    throw NumericalError("quant_params_from_range: non-finite range");
  if (lo > hi)
    throw std::invalid_argument("range is inverted: [" + std::to_string(lo) +
                                ", " + std::to_string(hi) + "]");
  QuantParams qp;
  qp.bits = bits;
  qp.axis = -1;
  double qmax = double(qp.qmax());
  double s = (hi - lo) / qmax;
  if (s < 1e-8) s = 1e-8;
  double z = round_half_even(-lo / s);
  z = std::clamp(z, 0.0, qmax);
  qp.scale = {s};
  qp.zero_point = {int32_t(z)};
  return qp;
}

QuantParams calibrate(const Tensor& x, int bits) {
  if (x.numel() == 0) throw std::invalid_argument("calibrate: empty tensor");
  double lo = x.values()[0], hi = x.values()[0];
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw NumericalError("calibrate: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return quant_params_from_range(lo, hi, bits);
}

// Elements that share an index along `axis` share quantization parameters.
// With stride = product of dims after axis, the slice of a flat index i is
// (i / stride) % shape[axis].
static int64_t axis_stride(const std::vector<int64_t>& shape, int axis) {
  int64_t stride = 1;
  for (size_t d = size_t(axis) + 1; d < shape.size(); ++d) stride *= shape[d];
  return stride;
}

QuantParams calibrate_per_channel(const Tensor& w, int bits, int axis) {
  if (axis < 0 || size_t(axis) >= w.shape.size())
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for " + shape_str(w.shape));
  int64_t channels = w.shape[size_t(axis)];
  if (channels == 0 || w.numel() == 0)
    throw std::invalid_argument("calibrate_per_channel: empty tensor");
  int64_t stride = axis_stride(w.shape, axis);
  std::vector<double> lo(size_t(channels), 0.0), hi(size_t(channels), 0.0);
  std::vector<bool> seen(size_t(channels), false);
  const auto& wv = w.values();
  for (int64_t i = 0; i < w.numel(); ++i) {
    double v = wv[size_t(i)];
    if (!std::isfinite(v))
      throw NumericalError("calibrate_per_channel: non-finite value");
    size_t c = size_t((i / stride) % channels);
    if (!seen[c]) {
      lo[c] = hi[c] = v;
      seen[c] = true;
    } else {
      lo[c] = std::min(lo[c], v);
      hi[c] = std::max(hi[c], v);
    }
  }
  QuantParams qp;
  qp.bits = bits;
  qp.axis = axis;
  for (int64_t c = 0; c < channels; ++c) {
    QuantParams one = quant_params_from_range(lo[size_t(c)], hi[size_t(c)], bits);
    qp.scale.push_back(one.scale[0]);
    qp.zero_point.push_back(one.zero_point[0]);
  }
  return qp;
}

static void check_params_fit(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  if (qp.axis >= 0) {
    if (size_t(qp.axis) >= x.shape.size())
      throw std::invalid_argument("axis " + std::to_string(qp.axis) +
                                  " out of range for " + shape_str(x.shape));
    if (int64_t(qp.scale.size()) != x.shape[size_t(qp.axis)])
      throw std::invalid_argument(
          std::to_string(qp.scale.size()) + " channel params for axis of size " +
          std::to_string(x.shape[size_t(qp.axis)]));
  }
}

QuantizedTensor quantize(const Tensor& x, const QuantParams& qp) {
  check_params_fit(x, qp);
  QuantizedTensor q;
  q.shape = x.shape;
  q.params = qp;
  q.codes.resize(size_t(x.numel()));
  double qmax = double(qp.qmax());
  int64_t stride = qp.axis >= 0 ? axis_stride(x.shape, qp.axis) : x.numel();
  int64_t channels = int64_t(qp.scale.size());
  const auto& xv = x.values();
  for (int64_t i = 0; i < x.numel(); ++i) {
    size_t c = qp.axis >= 0 ? size_t((i / stride) % channels) : 0;
    double code = round_half_even(xv[size_t(i)] / qp.scale[c]) +
                  double(qp.zero_point[c]);
    q.codes[size_t(i)] = uint8_t(std::clamp(code, 0.0, qmax));
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  q.params.validate();
  Tensor out = Tensor::zeros(q.shape);
  int64_t n = out.numel();
  if (size_t(n) != q.codes.size())
    throw std::invalid_argument("codes size " + std::to_string(q.codes.size()) +
                                " does not match " + shape_str(q.shape));
  const QuantParams& qp = q.params;
  int64_t stride = qp.axis >= 0 ? axis_stride(q.shape, qp.axis) : n;
  int64_t channels = int64_t(qp.scale.size());
  auto& ov = out.values();
  for (int64_t i = 0; i < n; ++i) {
    size_t c = qp.axis >= 0 ? size_t((i / stride) % channels) : 0;
    ov[size_t(i)] =
        qp.scale[c] * (double(q.codes[size_t(i)]) - double(qp.zero_point[c]));
  }
  return out;
}

// Shared straight-through backward: pass the incoming gradient where x lies
// inside the representable range (boundaries included), drop it elsewhere.
static void record_ste(Tensor& out, const Tensor& x, const QuantParams& qp,
                       int64_t stride, int64_t channels) {
  Tape* tp = joint_tape({&x});
  if (!tp) return;
  int px = x.node;
  auto xd = x.data;
  auto scale = qp.scale;
  auto zp = qp.zero_point;
  double qmax = double(qp.qmax());
  bool per_channel = qp.axis >= 0;
  out.tape = tp;
  out.node = tp->record(
      out.numel(), [px, xd, scale, zp, qmax, stride, channels,
                    per_channel](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buffer(px);
        for (size_t i = 0; i < g.size(); ++i) {
          size_t c =
              per_channel ? size_t((int64_t(i) / stride) % channels) : 0;
          double lo = scale[c] * (0.0 - double(zp[c]));
          double hi = scale[c] * (qmax - double(zp[c]));
          double v = (*xd)[i];
          if (v >= lo && v <= hi) gx[i] += g[i];
        }
      });
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  check_params_fit(x, qp);
  Tensor out = Tensor::zeros(x.shape);
  double qmax = double(qp.qmax());
  int64_t stride = qp.axis >= 0 ? axis_stride(x.shape, qp.axis) : x.numel();
  int64_t channels = int64_t(qp.scale.size());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t i = 0; i < x.numel(); ++i) {
    size_t c = qp.axis >= 0 ? size_t((i / stride) % channels) : 0;
    double code = round_half_even(xv[size_t(i)] / qp.scale[c]) +
                  double(qp.zero_point[c]);
    code = std::clamp(code, 0.0, qmax);
    ov[size_t(i)] = qp.scale[c] * (code - double(qp.zero_point[c]));
  }
  record_ste(out, x, qp, stride, channels);
  return out;
}

Tensor fake_quant_surrogate(const Tensor& x, const QuantParams& qp) {
  check_params_fit(x, qp);
  Tensor out = Tensor::zeros(x.shape);
  double qmax = double(qp.qmax());
  int64_t stride = qp.axis >= 0 ? axis_stride(x.shape, qp.axis) : x.numel();
  int64_t channels = int64_t(qp.scale.size());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t i = 0; i < x.numel(); ++i) {
    size_t c = qp.axis >= 0 ? size_t((i / stride) % channels) : 0;
    double lo = qp.scale[c] * (0.0 - double(qp.zero_point[c]));
    double hi = qp.scale[c] * (qmax - double(qp.zero_point[c]));
    ov[size_t(i)] = std::clamp(xv[size_t(i)], lo, hi);
  }
  record_ste(out, x, qp, stride, channels);
  return out;
}

}  // namespace mgrq
