#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lorank/dual.hpp"
#include "lorank/finite_diff.hpp"
#include "lorank/tape.hpp"
#include "lorank/tensor.hpp"
#include "support.hpp"

using namespace lorank;
using lorank::testing::random_tensor;
using lorank::testing::relative_error;

TEST(Matmul, IdentityIsNeutral) {
  const auto a = Tensor<double>::from_rows({{1.5, -2.0}, {0.25, 7.0}});
  EXPECT_EQ(matmul(Tensor<double>::identity(2), a), a);
}

TEST(Matmul, HandProduct) {
  const auto a = Tensor<double>::from_rows({{1, 0}, {0, 0}});
  const auto b = Tensor<double>::from_rows({{0, 2}, {3, 0}});
  EXPECT_EQ(matmul(a, b), Tensor<double>::from_rows({{0, 2}, {0, 0}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_tensor(5, 7, rng);
    const auto b = random_tensor(7, 3, rng);
    const auto got = matmul(a, b);
    const auto want = lorank::testing::naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<double>(2, 3), Tensor<double>(4, 5));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TEST(Tensor, ConstructorChecksLength) {
  EXPECT_THROW(Tensor<double>(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_EQ(Tensor<double>(2, 3).size(), 6u);
}

TEST(Primitives, ReluSignCases) {
  EXPECT_EQ(relu(Tensor<double>::row_vector({-1, 0, 2})), Tensor<double>::row_vector({0, 0, 2}));
}

TEST(Primitives, SoftmaxOfEqualRowIsUniform) {
  for (std::size_t k : {1u, 3u, 8u}) {
    const auto s = row_softmax(Tensor<double>(1, k, 4.2));
    for (double x : s.vec()) EXPECT_DOUBLE_EQ(x, 1.0 / static_cast<double>(k));
  }
}

TEST(Primitives, SoftmaxSurvivesLargeLogits) {
  const auto s = row_softmax(Tensor<double>::row_vector({1000.0, 0.0}));
  EXPECT_TRUE(all_finite(s));
  EXPECT_NEAR(s[0], 1.0, 1e-15);
}

TEST(Primitives, CrossEntropyOfCertainCorrectPredictionIsZero) {
  Tape<double> tape;
  const auto z = tape.constant(Tensor<double>::from_rows({{0.0, 800.0}, {900.0, 0.0}}));
  const std::vector<int> labels{1, 0};
  EXPECT_NEAR(cross_entropy_loss(z, labels).value().item(), 0.0, 1e-300);
}

TEST(Primitives, ShapeMismatchesThrow) {
  EXPECT_THROW(add(Tensor<double>(2, 2), Tensor<double>(2, 3)), DimensionError);
  EXPECT_THROW(sub(Tensor<double>(1, 2), Tensor<double>(2, 1)), DimensionError);
  EXPECT_THROW(hadamard(Tensor<double>(3, 1), Tensor<double>(1, 3)), DimensionError);
  Tape<double> tape;
  const auto p = tape.constant(Tensor<double>(2, 3));
  EXPECT_THROW(mse_loss(p, Tensor<double>(3, 2)), DimensionError);
  const std::vector<int> one{0};
  EXPECT_THROW(cross_entropy_loss(p, one), DimensionError);
}

// Each traced primitive is checked through loss = sum(op(x) ∘ R) for a fixed
// random R, against central differences.
struct UnaryCase {
  const char* name;
  std::size_t rows, cols;
  std::function<Var<double>(const Var<double>&)> op;
};

class UnaryGradient : public ::testing::TestWithParam<UnaryCase> {};

TEST_P(UnaryGradient, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  Rng rng(5);
  ParamMap<double> params{{"x", random_tensor(c.rows, c.cols, rng)}};
  Tape<double> probe(false);
  const auto out_shape = c.op(probe.constant(params.at("x"))).value();
  const auto r = random_tensor(out_shape.rows(), out_shape.cols(), rng);

  auto build = [&](Tape<double>& tape, const ParamMap<double>& p) {
    const auto x = tape.parameter("x", p.at("x"));
    return sum(hadamard(c.op(x), tape.constant(r)));
  };
  Tape<double> tape;
  const auto g = tape.backward(build(tape, params), {"x"});
  const auto fd = finite_diff_grad(
      [&](const ParamMap<double>& p) {
        Tape<double> t;
        return build(t, p).value().item();
      },
      params, 1e-6);
  EXPECT_LT(relative_error(g.at("x"), fd.at("x")), 1e-7) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    Primitives, UnaryGradient,
    ::testing::Values(
        UnaryCase{"scale", 3, 4, [](const Var<double>& x) { return scale(x, -2.5); }},
        UnaryCase{"transpose", 3, 4, [](const Var<double>& x) { return transpose(x); }},
        UnaryCase{"relu", 3, 4, [](const Var<double>& x) { return relu(x); }},
        UnaryCase{"sigmoid", 3, 4, [](const Var<double>& x) { return sigmoid(x); }},
        UnaryCase{"row_softmax", 3, 5, [](const Var<double>& x) { return row_softmax(x); }},
        UnaryCase{"mean_pool_rows", 4, 3, [](const Var<double>& x) { return mean_pool_rows(x); }},
        UnaryCase{"diag", 1, 4, [](const Var<double>& x) { return diag(x); }},
        UnaryCase{"self_matmul", 3, 3, [](const Var<double>& x) { return matmul(x, transpose(x)); }},
        UnaryCase{"self_add", 2, 3, [](const Var<double>& x) { return add(x, x); }},
        UnaryCase{"self_sub", 2, 3, [](const Var<double>& x) { return sub(x, scale(x, 3.0)); }},
        UnaryCase{"self_hadamard", 2, 3, [](const Var<double>& x) { return hadamard(x, x); }},
        UnaryCase{"add_row", 1, 3,
                  [](const Var<double>& b) {
                    return add_row(b.tape().constant(Tensor<double>::from_rows({{1, 2, 3}, {4, 5, 6}})), b);
                  }},
        UnaryCase{"concat_rows", 1, 3,
                  [](const Var<double>& x) { return concat_rows<double>({x, scale(x, 2.0), relu(x)}); }},
        UnaryCase{"mse", 3, 2,
                  [](const Var<double>& x) { return mse_loss(x, Tensor<double>::from_rows({{1, 0}, {0, 1}, {2, 2}})); }},
        UnaryCase{"cross_entropy", 3, 4,
                  [](const Var<double>& x) {
                    static const std::vector<int> labels{0, 3, 1};
                    return cross_entropy_loss(x, labels);
                  }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Backward, SharedNodeAccumulates) {
  Tape<double> tape;
  const auto x = tape.parameter("x", Tensor<double>::scalar(3.0));
  const auto y = hadamard(x, x);  // x²
  const auto g = tape.backward(sum(add(y, x)), {"x"});
  EXPECT_DOUBLE_EQ(g.at("x").item(), 7.0);
}

TEST(Backward, UnreachedParameterGetsZeros) {
  Tape<double> tape;
  const auto x = tape.parameter("x", Tensor<double>::scalar(2.0));
  tape.parameter("unused", Tensor<double>(2, 3, 1.0));
  const auto g = tape.backward(sum(x), {"x", "unused"});
  EXPECT_EQ(g.at("unused"), Tensor<double>(2, 3));
}

TEST(Backward, Errors) {
  Tape<double> tape;
  const auto x = tape.parameter("x", Tensor<double>(2, 2, 1.0));
  EXPECT_THROW(tape.backward(x, {"x"}), DimensionError);
  EXPECT_THROW(tape.backward(sum(x), {"nope"}), UnknownParameterError);
  EXPECT_THROW(tape.parameter("x", Tensor<double>::scalar(0.0)), DomainError);
  Gradients<double> g;
  EXPECT_THROW(g.at("missing"), UnknownParameterError);

  Tape<double> frozen(false);
  const auto y = frozen.parameter("y", Tensor<double>::scalar(1.0));
  EXPECT_THROW(frozen.backward(sum(y), {"y"}), DomainError);
}

TEST(Backward, GradientShapesMatchParameters) {
  Rng rng(2);
  Tape<double> tape;
  const auto a = tape.parameter("a", random_tensor(3, 4, rng));
  const auto b = tape.parameter("b", random_tensor(4, 2, rng));
  const auto g = tape.backward(sum(matmul(a, b)), {"a", "b"});
  EXPECT_TRUE(g.at("a").same_shape(a.value()));
  EXPECT_TRUE(g.at("b").same_shape(b.value()));
}

TEST(Dual, ArithmeticCarriesTangent) {
  const Dual x{2.0, 1.0};
  const auto y = x * x * Dual{3.0, 0.0} + exp(x) / x;  // 3x² + eˣ/x
  EXPECT_DOUBLE_EQ(y.val, 12.0 + std::exp(2.0) / 2.0);
  EXPECT_NEAR(y.eps, 12.0 + std::exp(2.0) * (2.0 - 1.0) / 4.0, 1e-12);
  EXPECT_NEAR(log(x).eps, 0.5, 1e-15);
  EXPECT_NEAR(sqrt(x).eps, 0.5 / std::sqrt(2.0), 1e-15);
}

TEST(FiniteDiff, RejectsBadInput) {
  const ParamMap<double> p{{"x", Tensor<double>::scalar(1.0)}};
  const auto f = [](const ParamMap<double>& q) { return q.at("x").item(); };
  EXPECT_THROW(finite_diff_grad(f, p, 0.0), DomainError);
  const auto bad = [](const ParamMap<double>&) { return std::nan(""); };
  EXPECT_THROW(finite_diff_grad(bad, p, 1e-3), NumericError);
}

TEST(FiniteDiff, QuadraticIsExact) {
  const ParamMap<double> p{{"x", Tensor<double>::row_vector({1.0, -2.0})}};
  const auto f = [](const ParamMap<double>& q) { return q.at("x")[0] * q.at("x")[0] + 3.0 * q.at("x")[1]; };
  const auto g = finite_diff_grad(f, p, 1e-3);
  EXPECT_NEAR(g.at("x")[0], 2.0, 1e-9);
  EXPECT_NEAR(g.at("x")[1], 3.0, 1e-9);
}

TEST(TensorProperty, FiniteInputsGiveFiniteOutputs) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_tensor(3, 4, rng, 30.0);
    const auto b = random_tensor(4, 3, rng, 30.0);
    EXPECT_TRUE(all_finite(matmul(a, b)));
    EXPECT_TRUE(all_finite(row_softmax(a)));
    EXPECT_TRUE(all_finite(sigmoid(a)));
    EXPECT_TRUE(all_finite(mean_pool_rows(a)));
  }
}
