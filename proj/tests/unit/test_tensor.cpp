#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mimdit/errors.hpp"
#include "mimdit/random.hpp"
#include "mimdit/tensor.hpp"

using namespace mimdit;

namespace {

Tensor triple_loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Tensor, ConstructionKeepsShapeAndDataInStep) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
}

TEST(Tensor, GradientSlotMatchesDataLength) {
  Tensor t({4}, 2.0);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.mutable_grad().size(), 4u);
  EXPECT_TRUE(t.has_grad());
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng = make_rng(1);
  Tensor b = normal_tensor({3, 2}, 1.0, rng);
  EXPECT_EQ(matmul(Tensor::identity(3), b), b);
}

TEST(Matmul, PermutationMatrixSwapsColumns) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(matmul(a, b), Tensor({2, 2}, {2, 1, 4, 3}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed);
    Tensor a = normal_tensor({3, 4}, 1.0, rng), b = normal_tensor({4, 2}, 1.0, rng);
    EXPECT_LE(max_abs_difference(matmul(a, b), triple_loop_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2, 3]"), std::string::npos) << what;
  }
}

TEST(Broadcast, RowVectorAddsToEveryRow) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2}, {10, 20});
  EXPECT_EQ(add(a, b), Tensor({2, 2}, {11, 22, 13, 24}));
  EXPECT_EQ(mul(a, Tensor::scalar(2.0)), scale(a, 2.0));
  EXPECT_THROW(add(a, Tensor({3})), DimensionError);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  Tensor s = softmax(Tensor({4}, 0.0), 0);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor s = softmax(Tensor({2}, {1000.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_GE(s[1], 0.0);
  EXPECT_LT(s[1], 1e-300);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = uniform_tensor({3, 5}, -30.0, 30.0, rng);
    for (std::size_t axis : {0u, 1u}) {
      Tensor s = softmax(x, axis);
      Tensor sums = scale(mean(s, axis), static_cast<double>(x.extent(axis)));
      for (double v : sums.data()) EXPECT_NEAR(v, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(softmax(Tensor({2, 2}), 2), DimensionError);
}

TEST(TopK, PicksLargest) {
  EXPECT_EQ(topk(Tensor({3}, {0.1, 0.7, 0.2}), 1).indices, (std::vector<std::size_t>{1}));
}

TEST(TopK, FullSelectionIsDescendingOrder) {
  EXPECT_EQ(topk(Tensor({4}, {0.1, 0.7, 0.2, 0.9}), 4).indices,
            (std::vector<std::size_t>{3, 1, 2, 0}));
}

TEST(TopK, TiesResolveToLowestIndex) {
  EXPECT_EQ(topk(Tensor({3}, {0.5, 0.5, 0.1}), 1).indices, (std::vector<std::size_t>{0}));
  EXPECT_EQ(topk(Tensor({4}, {0.2, 0.3, 0.3, 0.3}), 2).indices,
            (std::vector<std::size_t>{1, 2}));
}

TEST(TopK, RejectsOutOfRangeK) {
  EXPECT_THROW(topk(Tensor({3}), 0), ParameterError);
  EXPECT_THROW(topk(Tensor({3}), 4), ParameterError);
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Tensor y = layernorm(Tensor({1, 4}, 3.0), Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementHandValue) {
  Tensor y = layernorm(Tensor({1, 2}, {1.0, 3.0}), Tensor({2}, 1.0), Tensor({2}, 0.0));
  EXPECT_NEAR(y[0], -1.0, 1e-4);
  EXPECT_NEAR(y[1], 1.0, 1e-4);
  EXPECT_THROW(layernorm(Tensor({1, 2}), Tensor({3}), Tensor({3})), DimensionError);
}

TEST(ConcatSplit, RoundTripIsBitExact) {
  Rng rng = make_rng(3);
  for (std::size_t axis : {0u, 1u}) {
    Tensor x = normal_tensor({6, 5}, 1.0, rng);
    const std::vector<std::size_t> extents = axis == 0 ? std::vector<std::size_t>{1, 2, 3}
                                                       : std::vector<std::size_t>{2, 3};
    auto parts = split(x, extents, axis);
    EXPECT_EQ(concat(parts, axis), x);
  }
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng = make_rng(5);
  Tensor img = uniform_tensor({2, 5, 6}, 0.0, 1.0, rng);
  Tensor delta({3, 3});
  delta.at(1, 1) = 1.0;
  EXPECT_EQ(conv2d(img, delta), img);
}

TEST(Conv2d, BoxKernelAveragesWithReplicatedEdges) {
  Tensor img({1, 1, 3}, {0.0, 3.0, 6.0});
  Tensor box({1, 3}, 1.0 / 3.0);
  Tensor out = conv2d(img, box);
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 3.0, 1e-12);
  EXPECT_NEAR(out[2], 5.0, 1e-12);
}

TEST(Serialization, TensorRoundTripIsBitExact) {
  Rng rng = make_rng(9);
  Tensor t = normal_tensor({2, 3, 4}, 1.0, rng);
  t[0] = -0.0;
  std::stringstream buf;
  write_tensor(buf, t);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.size(), 4 + 3 * 4 + 24 * 8u);
  Tensor back = read_tensor(buf);
  EXPECT_EQ(back, t);
  EXPECT_TRUE(std::signbit(back[0]));
}

TEST(Serialization, TruncatedStreamIsPersistenceError) {
  std::stringstream buf;
  write_tensor(buf, Tensor({4}, 1.0));
  std::stringstream cut(buf.str().substr(0, 10));
  EXPECT_THROW(read_tensor(cut), PersistenceError);
}
