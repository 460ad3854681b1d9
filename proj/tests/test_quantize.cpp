#include "mgrq/quantize.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mgrq/errors.hpp"
#include "mgrq/rng.hpp"
#include "oracles.hpp"

using mgrq::QuantParams;
using mgrq::Tensor;

TEST(RoundHalfEven, FrozenValues) {
  EXPECT_EQ(mgrq::round_half_even(0.5), 0.0);
  EXPECT_EQ(mgrq::round_half_even(1.5), 2.0);
  EXPECT_EQ(mgrq::round_half_even(2.5), 2.0);
  EXPECT_EQ(mgrq::round_half_even(3.5), 4.0);
  EXPECT_EQ(mgrq::round_half_even(-0.5), 0.0);
  EXPECT_EQ(mgrq::round_half_even(-1.5), -2.0);
  EXPECT_EQ(mgrq::round_half_even(-2.5), -2.0);
  EXPECT_EQ(mgrq::round_half_even(3.49), 3.0);
  EXPECT_EQ(mgrq::round_half_even(3.51), 4.0);
  EXPECT_EQ(mgrq::round_half_even(-3.49), -3.0);
  EXPECT_EQ(mgrq::round_half_even(7.0), 7.0);
  EXPECT_EQ(mgrq::round_half_even(-7.0), -7.0);
  EXPECT_EQ(mgrq::round_half_even(0.0), 0.0);
}

TEST(QuantParamsFromRange, FrozenValues) {
  auto qp = mgrq::quant_params_from_range(0.0, 3.0, 2);
  EXPECT_EQ(qp.bits, 2);
  EXPECT_EQ(qp.qmax(), 3);
  ASSERT_EQ(qp.scale.size(), 1u);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1.0);
  EXPECT_EQ(qp.zero_point[0], 0);

  qp = mgrq::quant_params_from_range(-1.0, 2.0, 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 3.0 / 255.0);
  EXPECT_EQ(qp.zero_point[0], 85);
}

TEST(QuantParamsFromRange, ZeroPointIsClippedToCodeRange) {
  // A strictly positive range pushes the raw zero point negative.
  auto qp = mgrq::quant_params_from_range(1.0, 3.0, 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 2.0 / 255.0);
  EXPECT_EQ(qp.zero_point[0], 0);
  // A strictly negative range pushes it past the top code.
  qp = mgrq::quant_params_from_range(-3.0, -1.0, 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 2.0 / 255.0);
  EXPECT_EQ(qp.zero_point[0], 255);
}

TEST(QuantParamsFromRange, DegenerateRangeClampsScale) {
  auto qp = mgrq::quant_params_from_range(5.0, 5.0, 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1e-8);
  EXPECT_EQ(qp.zero_point[0], 0);
}

TEST(QuantParamsFromRange, RejectsBadArguments) {
  EXPECT_THROW(mgrq::quant_params_from_range(1.0, 0.0, 8),
               std::invalid_argument);
  EXPECT_THROW(mgrq::quant_params_from_range(0.0, 1.0, 1),
               std::invalid_argument);
  EXPECT_THROW(mgrq::quant_params_from_range(0.0, 1.0, 9),
               std::invalid_argument);
}

TEST(Calibrate, FrozenValues) {
  auto qp = mgrq::calibrate(Tensor::from({4}, {0.0, 1.0, 2.0, 3.0}), 2);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1.0);
  EXPECT_EQ(qp.zero_point[0], 0);

  qp = mgrq::calibrate(Tensor::from({3}, {-1.0, 0.5, 2.0}), 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 3.0 / 255.0);
  EXPECT_EQ(qp.zero_point[0], 85);
}

TEST(Calibrate, ConstantTensorSaturatesAtTopCode) {
  Tensor x = Tensor::full({3}, 5.0);
  auto qp = mgrq::calibrate(x, 8);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1e-8);
  EXPECT_EQ(qp.zero_point[0], 0);
  auto q = mgrq::quantize(x, qp);
  for (auto c : q.codes) EXPECT_EQ(c, 255);
  Tensor dq = mgrq::dequantize(q);
  for (double v : dq.values()) EXPECT_DOUBLE_EQ(v, 255e-8);
}

TEST(Calibrate, PermutationInvariant) {
  mgrq::Rng rng(11);
  std::vector<double> vals = rng.normal_vector(64, 2.0);
  auto qp = mgrq::calibrate(Tensor::from({64}, vals), 4);
  std::vector<size_t> perm(64);
  for (size_t i = 0; i < 64; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> shuffled(64);
  for (size_t i = 0; i < 64; ++i) shuffled[i] = vals[perm[i]];
  auto qp2 = mgrq::calibrate(Tensor::from({64}, shuffled), 4);
  EXPECT_EQ(qp.scale, qp2.scale);
  EXPECT_EQ(qp.zero_point, qp2.zero_point);
}

TEST(Calibrate, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(mgrq::calibrate(Tensor::zeros({0}), 8), std::invalid_argument);
  EXPECT_THROW(mgrq::calibrate(Tensor::from({2}, {0.0, std::nan("")}), 8),
               mgrq::NumericalError);
}

TEST(CalibratePerChannel, FrozenValuesAxis0) {
  Tensor w = Tensor::from({2, 2}, {0.0, 3.0, 0.0, 6.0});
  auto qp = mgrq::calibrate_per_channel(w, 2, 0);
  ASSERT_EQ(qp.scale.size(), 2u);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1.0);
  EXPECT_DOUBLE_EQ(qp.scale[1], 2.0);
  EXPECT_EQ(qp.zero_point[0], 0);
  EXPECT_EQ(qp.zero_point[1], 0);
  EXPECT_EQ(qp.axis, 0);
}

TEST(CalibratePerChannel, FrozenValuesAxis1) {
  Tensor w = Tensor::from({2, 2}, {-1.0, 0.0, 2.0, 4.0});
  auto qp = mgrq::calibrate_per_channel(w, 8, 1);
  ASSERT_EQ(qp.scale.size(), 2u);
  EXPECT_DOUBLE_EQ(qp.scale[0], 3.0 / 255.0);
  EXPECT_EQ(qp.zero_point[0], 85);
  EXPECT_DOUBLE_EQ(qp.scale[1], 4.0 / 255.0);
  EXPECT_EQ(qp.zero_point[1], 0);
}

TEST(CalibratePerChannel, RejectsBadAxis) {
  Tensor w = Tensor::zeros({2, 2});
  EXPECT_THROW(mgrq::calibrate_per_channel(w, 8, 2), std::invalid_argument);
  EXPECT_THROW(mgrq::calibrate_per_channel(w, 8, -1), std::invalid_argument);
}

TEST(QuantizeDequantize, MatchesFakeQuantExactly) {
  mgrq::Rng rng(3);
  Tensor x = Tensor::from({8, 8}, rng.normal_vector(64, 1.5));
  for (int bits : {2, 4, 8}) {
    auto qp = mgrq::calibrate(x, bits);
    Tensor via_codes = mgrq::dequantize(mgrq::quantize(x, qp));
    Tensor direct = mgrq::fake_quant(x, qp);
    for (size_t i = 0; i < 64; ++i)
      EXPECT_EQ(via_codes.values()[i], direct.values()[i]) << "bits " << bits;
  }
}

TEST(QuantizeDequantize, CodesStayInRangeAndValuesAreFew) {
  mgrq::Rng rng(4);
  Tensor x = Tensor::from({100}, rng.normal_vector(100, 3.0));
  for (int bits : {2, 3, 4}) {
    auto qp = mgrq::calibrate(x, bits);
    auto q = mgrq::quantize(x, qp);
    std::set<uint8_t> distinct;
    for (auto c : q.codes) {
      EXPECT_LE(int(c), int(qp.qmax()));
      distinct.insert(c);
    }
    EXPECT_LE(distinct.size(), size_t(1) << bits);
  }
}

TEST(QuantizeDequantize, RoundTripErrorIsAtMostHalfStep) {
  mgrq::Rng rng(5);
  Tensor x = Tensor::from({256}, rng.normal_vector(256, 1.0));
  auto qp = mgrq::calibrate(x, 8);
  Tensor dq = mgrq::dequantize(mgrq::quantize(x, qp));
  for (size_t i = 0; i < 256; ++i)
    EXPECT_LE(std::abs(dq.values()[i] - x.values()[i]),
              qp.scale[0] / 2 + 1e-12);
}

TEST(QuantizeDequantize, RejectsChannelCountMismatch) {
  Tensor x = Tensor::zeros({2, 3});
  QuantParams qp;
  qp.bits = 8;
  qp.axis = 1;
  qp.scale = {1.0, 1.0};  // axis 1 has three slices
  qp.zero_point = {0, 0};
  EXPECT_THROW(mgrq::quantize(x, qp), std::invalid_argument);
}

TEST(QuantParamsValidate, RejectsMalformedParams) {
  QuantParams qp;
  qp.bits = 8;
  qp.scale = {1.0};
  qp.zero_point = {0, 0};
  EXPECT_THROW(qp.validate(), std::invalid_argument);
  qp.zero_point = {0};
  qp.scale = {-1.0};
  EXPECT_THROW(qp.validate(), std::invalid_argument);
  qp.scale = {1.0};
  qp.bits = 12;
  EXPECT_THROW(qp.validate(), std::invalid_argument);
  qp.bits = 8;
  qp.zero_point = {300};
  EXPECT_THROW(qp.validate(), std::invalid_argument);
  qp.zero_point = {0};
  EXPECT_NO_THROW(qp.validate());
}

TEST(FakeQuant, FrozenValuesAtUnitScale) {
  QuantParams qp = mgrq::quant_params_from_range(0.0, 3.0, 2);
  Tensor x = Tensor::from({5}, {0.4, 0.6, 2.5, 3.7, -0.7});
  Tensor y = mgrq::fake_quant(x, qp);
  EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.values()[1], 1.0);
  EXPECT_DOUBLE_EQ(y.values()[2], 2.0);  // tie rounds to even
  EXPECT_DOUBLE_EQ(y.values()[3], 3.0);  // clipped at the top code
  EXPECT_DOUBLE_EQ(y.values()[4], 0.0);  // clipped at the bottom code
}

TEST(FakeQuant, Idempotent) {
  mgrq::Rng rng(6);
  Tensor x = Tensor::from({64}, rng.normal_vector(64, 2.0));
  for (int bits : {2, 4, 8}) {
    auto qp = mgrq::calibrate(x, bits);
    Tensor once = mgrq::fake_quant(x, qp);
    Tensor twice = mgrq::fake_quant(once, qp);
    EXPECT_EQ(once.values(), twice.values()) << "bits " << bits;
  }
}

TEST(FakeQuant, PerChannelAppliesPerSlice) {
  Tensor w = Tensor::from({2, 2}, {-1.0, 0.0, 2.0, 4.0});
  auto qp = mgrq::calibrate_per_channel(w, 8, 1);
  Tensor y = mgrq::fake_quant(w, qp);
  // Column 0 uses scale 3/255, zero point 85; column 1 uses 4/255, 0.
  double s0 = 3.0 / 255.0, s1 = 4.0 / 255.0;
  EXPECT_NEAR(y.values()[0], -1.0, s0 / 2);
  EXPECT_NEAR(y.values()[1], 0.0, s1 / 2);
  EXPECT_NEAR(y.values()[2], 2.0, s0 / 2);
  EXPECT_NEAR(y.values()[3], 4.0, s1 / 2);
  // Columns are rounded on their own grids, so cross-applying the other
  // column's step width would make the error bound fail for these values.
  EXPECT_DOUBLE_EQ(y.values()[3], 4.0);
}

TEST(FakeQuant, SteMaskIsInclusiveAtRangeBoundaries) {
  QuantParams qp;
  qp.bits = 3;
  qp.axis = -1;
  qp.scale = {0.5};
  qp.zero_point = {2};
  // Representable range: [0.5 * (0 - 2), 0.5 * (7 - 2)] = [-1.0, 2.5].
  Tensor x = Tensor::from({6}, {-1.5, -1.0, 0.3, 2.5, 2.6, 10.0});
  std::vector<double> want = {0.0, 1.0, 1.0, 1.0, 0.0, 0.0};
  for (bool surrogate : {false, true}) {
    mgrq::Tape tape;
    Tensor xt = x;
    tape.watch(xt);
    Tensor y = surrogate ? mgrq::fake_quant_surrogate(xt, qp)
                         : mgrq::fake_quant(xt, qp);
    tape.backward(mgrq::sum(y));
    Tensor g = tape.grad(xt);
    for (size_t i = 0; i < want.size(); ++i)
      EXPECT_DOUBLE_EQ(g.values()[i], want[i])
          << (surrogate ? "surrogate" : "fake_quant") << " at " << i;
  }
}

TEST(FakeQuantSurrogate, ForwardIsPureClip) {
  QuantParams qp;
  qp.bits = 3;
  qp.axis = -1;
  qp.scale = {0.5};
  qp.zero_point = {2};
  Tensor x = Tensor::from({5}, {-1.5, -0.37, 0.3, 2.5, 4.0});
  Tensor y = mgrq::fake_quant_surrogate(x, qp);
  EXPECT_DOUBLE_EQ(y.values()[0], -1.0);
  EXPECT_DOUBLE_EQ(y.values()[1], -0.37);  // interior values pass unrounded
  EXPECT_DOUBLE_EQ(y.values()[2], 0.3);
  EXPECT_DOUBLE_EQ(y.values()[3], 2.5);
  EXPECT_DOUBLE_EQ(y.values()[4], 2.5);
}

TEST(FakeQuantSurrogate, GradientMatchesFiniteDifferences) {
  mgrq::Rng rng(7);
  Tensor x = Tensor::from({16}, rng.normal_vector(16, 0.8));
  // A fixed range well clear of every sample keeps the clip kinks away from
  // the finite-difference probes.
  auto qp = mgrq::quant_params_from_range(-3.0, 3.0, 4);
  double err = oracle::max_grad_err(
      {x},
      [&qp](const std::vector<Tensor>& in) {
        return mgrq::sum(mgrq::fake_quant_surrogate(in[0], qp));
      },
      1e-6);
  EXPECT_LT(err, 1e-4);
}
