#include "mgrq/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "mgrq/rng.hpp"
#include "oracles.hpp"

using mgrq::Tensor;

namespace {

int64_t numel_of(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor rand_tensor(std::vector<int64_t> shape, mgrq::Rng& rng,
                   double stddev = 1e-2) {
  auto n = size_t(numel_of(shape));
  return Tensor::from(std::move(shape), rng.normal_vector(n, stddev));
}

}  // namespace

TEST(Matmul, HandValues) {
  auto a = Tensor::from({1, 2}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  auto out = mgrq::matmul(a, b);
  ASSERT_EQ(out.shape, (std::vector<int64_t>{1, 1}));
  EXPECT_DOUBLE_EQ(out.values()[0], 11.0);
}

TEST(Matmul, IdentityPassThrough) {
  mgrq::Rng rng(3);
  auto a = rand_tensor({4, 4}, rng, 1.0);
  auto eye = Tensor::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.values()[i * 4 + i] = 1.0;
  auto out = mgrq::matmul(a, eye);
  for (int64_t i = 0; i < a.numel(); ++i)
    EXPECT_DOUBLE_EQ(out.values()[i], a.values()[i]);
}

TEST(Matmul, MatchesNaiveOracle) {
  mgrq::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = rand_tensor({5, 5}, rng, 1.0);
    auto b = rand_tensor({5, 5}, rng, 1.0);
    auto out = mgrq::matmul(a, b);
    auto ref = oracle::naive_matmul(a.values(), b.values(), 5, 5, 5);
    for (size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(out.values()[i], ref[i], 1e-10);
  }
}

TEST(Matmul, MismatchNamesBothShapes) {
  auto a = Tensor::zeros({1, 2});
  auto b = Tensor::zeros({3, 1});
  try {
    mgrq::matmul(a, b);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[1, 2]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3, 1]"), std::string::npos) << msg;
  }
}

TEST(Matmul, Rank3FlattensLeadingDims) {
  mgrq::Rng rng(5);
  auto a = rand_tensor({2, 3, 4}, rng, 1.0);
  auto b = rand_tensor({4, 5}, rng, 1.0);
  auto out = mgrq::matmul(a, b);
  ASSERT_EQ(out.shape, (std::vector<int64_t>{2, 3, 5}));
  auto ref = oracle::naive_matmul(a.values(), b.values(), 6, 4, 5);
  for (size_t i = 0; i < ref.size(); ++i)
    EXPECT_NEAR(out.values()[i], ref[i], 1e-12);
}

TEST(Matmul, Deterministic) {
  mgrq::Rng rng(7);
  auto a = rand_tensor({8, 8}, rng, 1.0);
  auto b = rand_tensor({8, 8}, rng, 1.0);
  auto o1 = mgrq::matmul(a, b);
  auto o2 = mgrq::matmul(a, b);
  EXPECT_EQ(0, std::memcmp(o1.values().data(), o2.values().data(),
                           sizeof(double) * o1.numel()));
}

TEST(Bmm, MatchesPerBatchOracle) {
  mgrq::Rng rng(13);
  auto a = rand_tensor({2, 3, 4}, rng, 1.0);
  auto b = rand_tensor({2, 4, 5}, rng, 1.0);
  auto out = mgrq::bmm(a, b);
  ASSERT_EQ(out.shape, (std::vector<int64_t>{2, 3, 5}));
  for (int64_t s = 0; s < 2; ++s) {
    std::vector<double> as(a.values().begin() + s * 12,
                           a.values().begin() + (s + 1) * 12);
    std::vector<double> bs(b.values().begin() + s * 20,
                           b.values().begin() + (s + 1) * 20);
    auto ref = oracle::naive_matmul(as, bs, 3, 4, 5);
    for (size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(out.values()[s * 15 + i], ref[i], 1e-12);
  }
}

TEST(BmmNt, MatchesTransposedOracle) {
  mgrq::Rng rng(17);
  auto a = rand_tensor({2, 3, 4}, rng, 1.0);
  auto b = rand_tensor({2, 5, 4}, rng, 1.0);
  auto out = mgrq::bmm_nt(a, b);
  ASSERT_EQ(out.shape, (std::vector<int64_t>{2, 3, 5}));
  for (int64_t s = 0; s < 2; ++s)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double ref = 0.0;
        for (int64_t p = 0; p < 4; ++p)
          ref += a.values()[s * 12 + i * 4 + p] *
                 b.values()[s * 20 + j * 4 + p];
        EXPECT_NEAR(out.values()[s * 15 + i * 5 + j], ref, 1e-12);
      }
}

TEST(Softmax, FrozenValues) {
  auto x = Tensor::from({1, 2}, {0.0, std::log(2.0)});
  auto y = mgrq::softmax_lastdim(x);
  EXPECT_NEAR(y.values()[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(y.values()[1], 2.0 / 3.0, 1e-12);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  auto x = Tensor::from({1, 2}, {1000.0, 1000.0});
  auto y = mgrq::softmax_lastdim(x);
  EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  mgrq::Rng rng(23);
  auto x = rand_tensor({10, 7}, rng, 3.0);
  auto y = mgrq::softmax_lastdim(x);
  for (int64_t r = 0; r < 10; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < 7; ++j) {
      double v = y.values()[r * 7 + j];
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, FrozenValues) {
  auto x = Tensor::from({1, 2}, {0.0, 2.0});
  auto gamma = Tensor::from({2}, {2.0, 2.0});
  auto beta = Tensor::from({2}, {1.0, 1.0});
  auto y = mgrq::layer_norm(x, gamma, beta, 1e-12);
  EXPECT_NEAR(y.values()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.values()[1], 3.0, 1e-9);
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  auto x = Tensor::from({1, 3}, {1.0, 1.0, 1.0});
  auto gamma = Tensor::from({3}, {1.0, 1.0, 1.0});
  auto beta = Tensor::zeros({3});
  auto y = mgrq::layer_norm(x, gamma, beta, 1e-6);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(y.values()[j], 0.0);
}

TEST(LayerNorm, NormalizesEachRow) {
  mgrq::Rng rng(29);
  auto x = rand_tensor({6, 16}, rng, 2.0);
  auto gamma = Tensor::full({16}, 1.0);
  auto beta = Tensor::zeros({16});
  auto y = mgrq::layer_norm(x, gamma, beta, 1e-10);
  for (int64_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 16; ++j) mean += y.values()[r * 16 + j];
    mean /= 16.0;
    for (int64_t j = 0; j < 16; ++j) {
      double c = y.values()[r * 16 + j] - mean;
      var += c * c;
    }
    var /= 16.0;
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Gelu, FrozenValues) {
  auto x = Tensor::from({3}, {0.0, 1.0, -6.0});
  auto y = mgrq::gelu(x);
  EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
  EXPECT_NEAR(y.values()[1], 0.841345, 1e-6);
  EXPECT_NEAR(y.values()[1], oracle::normal_cdf_quadrature(1.0), 1e-9);
  EXPECT_NEAR(y.values()[2], 0.0, 1e-8);
}

TEST(Gelu, ReflectionIdentity) {
  // x * cdf(x) - (-x) * cdf(-x) == x
  mgrq::Rng rng(31);
  auto x = rand_tensor({20}, rng, 2.0);
  auto nx = mgrq::scale(x, -1.0);
  auto a = mgrq::gelu(x);
  auto b = mgrq::gelu(nx);
  for (int64_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(a.values()[i] - b.values()[i], x.values()[i], 1e-12);
}

TEST(Mse, FrozenValues) {
  EXPECT_DOUBLE_EQ(
      mgrq::mse(Tensor::from({2}, {0, 0}), Tensor::from({2}, {2, 0})).item(),
      2.0);
  EXPECT_DOUBLE_EQ(
      mgrq::mse(Tensor::from({1}, {1}), Tensor::from({1}, {-1})).item(), 4.0);
}

TEST(Mse, ShapeMismatchThrows) {
  EXPECT_THROW(mgrq::mse(Tensor::zeros({2}), Tensor::zeros({3})),
               std::invalid_argument);
}

TEST(Elementwise, HandValues) {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {10, 20});
  EXPECT_DOUBLE_EQ(mgrq::add(a, b).values()[1], 22.0);
  EXPECT_DOUBLE_EQ(mgrq::mul(a, b).values()[1], 40.0);
  EXPECT_DOUBLE_EQ(mgrq::scale(a, -2.0).values()[0], -2.0);
  EXPECT_DOUBLE_EQ(mgrq::sum(a).item(), 3.0);
}

TEST(AddBroadcast, SuffixShapes) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto bias = Tensor::from({2}, {10, 20});
  auto out = mgrq::add_broadcast(a, bias);
  EXPECT_DOUBLE_EQ(out.values()[0], 11.0);
  EXPECT_DOUBLE_EQ(out.values()[3], 24.0);

  auto cube = Tensor::full({2, 2, 2}, 1.0);
  auto plane = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out2 = mgrq::add_broadcast(cube, plane);
  EXPECT_DOUBLE_EQ(out2.values()[0], 2.0);
  EXPECT_DOUBLE_EQ(out2.values()[7], 5.0);

  EXPECT_THROW(mgrq::add_broadcast(a, Tensor::zeros({3})),
               std::invalid_argument);
}

TEST(MeanTokens, HandValues) {
  auto x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  auto y = mgrq::mean_tokens(x);
  ASSERT_EQ(y.shape, (std::vector<int64_t>{1, 2}));
  EXPECT_DOUBLE_EQ(y.values()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.values()[1], 3.0);
}

TEST(SliceConcat, RoundTrip) {
  mgrq::Rng rng(37);
  auto x = rand_tensor({2, 3, 6}, rng, 1.0);
  std::vector<Tensor> parts;
  for (int64_t c = 0; c < 6; c += 2)
    parts.push_back(mgrq::slice_lastdim(x, c, c + 2));
  auto back = mgrq::concat_lastdim(parts);
  ASSERT_EQ(back.shape, x.shape);
  for (int64_t i = 0; i < x.numel(); ++i)
    EXPECT_DOUBLE_EQ(back.values()[i], x.values()[i]);
}

TEST(CrossEntropy, HandValues) {
  auto logits = Tensor::from({1, 2}, {0.0, 0.0});
  std::vector<int32_t> labels{0};
  mgrq::Tape tape;
  tape.watch(logits);
  auto loss = mgrq::cross_entropy_mean(logits, labels);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
  tape.backward(loss);
  auto g = tape.grad(logits);
  EXPECT_NEAR(g.values()[0], -0.5, 1e-12);
  EXPECT_NEAR(g.values()[1], 0.5, 1e-12);
}

// --- backward ------------------------------------------------------------

TEST(Backward, FrozenValues) {
  {
    auto w = Tensor::from({1}, {3.0});
    mgrq::Tape tape;
    tape.watch(w);
    auto loss = mgrq::mse(w, Tensor::zeros({1}));
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(tape.grad(w).values()[0], 6.0);
  }
  {
    auto w = Tensor::from({2}, {1.0, 2.0});
    mgrq::Tape tape;
    tape.watch(w);
    auto loss = mgrq::sum(mgrq::mul(w, w));
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(tape.grad(w).values()[0], 2.0);
    EXPECT_DOUBLE_EQ(tape.grad(w).values()[1], 4.0);
  }
}

TEST(Backward, UnreachableParameterGetsZeroGradient) {
  auto w = Tensor::from({2}, {1.0, 2.0});
  auto unused = Tensor::from({3}, {5.0, 6.0, 7.0});
  mgrq::Tape tape;
  tape.watch(w);
  tape.watch(unused);
  auto loss = mgrq::sum(w);
  tape.backward(loss);
  auto g = tape.grad(unused);
  ASSERT_EQ(g.shape, unused.shape);
  for (auto v : g.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Backward, RequiresScalarLoss) {
  auto w = Tensor::from({2}, {1.0, 2.0});
  mgrq::Tape tape;
  tape.watch(w);
  auto y = mgrq::mul(w, w);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);

  auto constant = Tensor::scalar(1.0);
  EXPECT_THROW(tape.backward(constant), std::invalid_argument);
}

TEST(Backward, VisitsEachNodeOnceInReverseOrder) {
  mgrq::Tape tape;
  auto leaf = Tensor::from({1}, {1.0});
  tape.watch(leaf);
  int leaf_node = leaf.node;

  std::vector<int> order;
  auto counted = [&](int id) {
    return [&order, id, leaf_node](mgrq::Tape& t,
                                   const std::vector<double>& g) {
      order.push_back(id);
      auto& sink = t.grad_buffer(leaf_node);
      for (double v : g) sink[0] += v;
    };
  };
  // diamond: leaf feeds two middle nodes, both feed the top
  int n1 = tape.record(1, counted(1));
  int n2 = tape.record(1, counted(2));
  int n3 = tape.record(1, [&order, n1, n2](mgrq::Tape& t,
                                           const std::vector<double>& g) {
    order.push_back(3);
    t.grad_buffer(n1)[0] += g[0];
    t.grad_buffer(n2)[0] += g[0];
  });

  Tensor top;
  top.shape = {1};
  top.data = std::make_shared<std::vector<double>>(1, 0.0);
  top.tape = &tape;
  top.node = n3;
  tape.backward(top);

  ASSERT_EQ(order, (std::vector<int>{3, 2, 1}));
  EXPECT_DOUBLE_EQ(tape.grad(leaf).values()[0], 2.0);
}

TEST(Backward, RejectsTensorsFromAnotherTape) {
  mgrq::Tape t1, t2;
  auto a = Tensor::from({2}, {1.0, 2.0});
  auto b = Tensor::from({2}, {3.0, 4.0});
  t1.watch(a);
  t2.watch(b);
  EXPECT_THROW(mgrq::add(a, b), std::invalid_argument);
}

// --- finite differences --------------------------------------------------

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

Tensor weigh(const Tensor& t, const Tensor& c) {
  return mgrq::sum(mgrq::mul(t, c));
}

}  // namespace

TEST(GradCheck, AddMulScaleBroadcast) {
  mgrq::Rng rng(41);
  auto c = rand_tensor({3, 4}, rng, 1.0).detached();
  {
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::add(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::mul(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({3, 4}, rng);
    auto err = oracle::max_grad_err(
        {a},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::scale(in[0], -1.7), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({4}, rng);
    auto cc = rand_tensor({2, 3, 4}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::add_broadcast(in[0], in[1]), cc);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
}

TEST(GradCheck, MatmulFamily) {
  mgrq::Rng rng(43);
  {
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 5}, rng);
    auto c = rand_tensor({3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::matmul(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({4, 5}, rng);
    auto c = rand_tensor({2, 3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::matmul(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 4, 5}, rng);
    auto c = rand_tensor({2, 3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::bmm(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 5, 4}, rng);
    auto c = rand_tensor({2, 3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::bmm_nt(in[0], in[1]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
}

TEST(GradCheck, SoftmaxLayerNormGelu) {
  mgrq::Rng rng(47);
  {
    auto x = rand_tensor({3, 5}, rng);
    auto c = rand_tensor({3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {x},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::softmax_lastdim(in[0]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto x = rand_tensor({4, 6}, rng);
    auto gamma = Tensor::from({6}, rng.normal_vector(6, 1e-2));
    for (auto& v : gamma.values()) v += 1.0;
    auto beta = rand_tensor({6}, rng);
    auto c = rand_tensor({4, 6}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {x, gamma, beta},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::layer_norm(in[0], in[1], in[2], 1e-6), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto x = rand_tensor({3, 4}, rng);
    auto c = rand_tensor({3, 4}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {x},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::gelu(in[0]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
}

TEST(GradCheck, ReductionsAndReshapes) {
  mgrq::Rng rng(53);
  {
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return mgrq::mse(in[0], in[1]);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto x = rand_tensor({2, 3, 4}, rng);
    auto c = rand_tensor({2, 4}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {x},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::mean_tokens(in[0]), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto x = rand_tensor({2, 3, 6}, rng);
    auto c = rand_tensor({2, 3, 2}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {x},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::slice_lastdim(in[0], 2, 4), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto a = rand_tensor({2, 3, 2}, rng), b = rand_tensor({2, 3, 3}, rng);
    auto c = rand_tensor({2, 3, 5}, rng, 1.0).detached();
    auto err = oracle::max_grad_err(
        {a, b},
        [&](const std::vector<Tensor>& in) {
          return weigh(mgrq::concat_lastdim({in[0], in[1]}), c);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
  {
    auto logits = rand_tensor({4, 5}, rng);
    std::vector<int32_t> labels{0, 3, 1, 4};
    auto err = oracle::max_grad_err(
        {logits},
        [&](const std::vector<Tensor>& in) {
          return mgrq::cross_entropy_mean(in[0], labels);
        },
        kStep);
    EXPECT_LE(err, kTol);
  }
}
