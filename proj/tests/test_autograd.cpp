#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "support.hpp"

using namespace ttacil;
using ttacil::test::check_gradients;
using ttacil::test::random_tensor;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

}  // namespace

TEST(Forward, SoftmaxOfEqualLogitsIsUniform) {
  ag::Tape tape;
  auto p = ag::softmax(tape.constant(vec({0, 0, 0})));
  for (double v : p.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Forward, Relu) {
  ag::Tape tape;
  auto r = ag::relu(tape.constant(vec({-1, 0, 2})));
  EXPECT_EQ(r.value().storage(), (std::vector<double>{0, 0, 2}));
}

TEST(Forward, MatmulOfOnes) {
  ag::Tape tape;
  auto c = ag::matmul(tape.constant(Tensor(Shape{2, 3}, 1.0)), tape.constant(Tensor(Shape{3, 1}, 1.0)));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.value().storage(), (std::vector<double>{3, 3}));
}

TEST(Forward, ShapeMismatchIsRejected) {
  ag::Tape tape;
  auto a = tape.constant(Tensor(Shape{2, 3}));
  auto b = tape.constant(Tensor(Shape{2, 3}));
  EXPECT_THROW(ag::matmul(a, b), ShapeError);
  EXPECT_THROW(ag::add(a, tape.constant(Tensor(Shape{2}))), ShapeError);
}

TEST(Forward, NonFiniteInputIsRejected) {
  ag::Tape tape;
  EXPECT_THROW(tape.constant(vec({1.0, std::numeric_limits<double>::quiet_NaN()})), NonFiniteError);
  EXPECT_THROW(tape.leaf(vec({std::numeric_limits<double>::infinity()}), true), NonFiniteError);
}

TEST(Forward, SoftmaxIsAShiftInvariantDistribution) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ag::Tape tape;
    Tensor logits = random_tensor(Shape{4, 7}, rng, -20.0, 20.0);
    Tensor shifted = logits;
    const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
    for (auto& v : shifted.data()) v += c;
    auto p = ag::softmax(tape.constant(logits));
    auto q = ag::softmax(tape.constant(shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        EXPECT_GE(p.value().at(r, k), 0.0);
        EXPECT_NEAR(p.value().at(r, k), q.value().at(r, k), 1e-12);
        s += p.value().at(r, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, SumOfSquares) {
  ag::Tape tape;
  auto x = tape.leaf(vec({1, 2}), true);
  tape.backward(ag::sum(ag::mul(x, x)));
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<double>{2, 4}));
}

TEST(Backward, CrossEntropyAtUniformPrediction) {
  ag::Tape tape;
  auto logits = tape.leaf(Tensor(Shape{1, 4}, 0.0), true);
  auto loss = ag::cross_entropy(logits, {0});
  EXPECT_NEAR(loss.value().item(), std::log(4.0), 1e-15);
  tape.backward(loss);
  const Tensor g = tape.grad(logits);
  const std::vector<double> want{-0.75, 0.25, 0.25, 0.25};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], want[i], 1e-15);
}

TEST(Backward, CrossEntropyDecreasesWithTrueClassMargin) {
  double prev = std::numeric_limits<double>::infinity();
  for (double m = -3.0; m <= 3.0; m += 0.5) {
    ag::Tape tape;
    auto l = ag::cross_entropy(tape.constant(Tensor(Shape{1, 3}, std::vector<double>{m, 0, 0})), {0});
    EXPECT_LT(l.value().item(), prev);
    prev = l.value().item();
  }
}

TEST(Backward, CrossEntropyRejectsOutOfRangeLabel) {
  ag::Tape tape;
  EXPECT_THROW(ag::cross_entropy(tape.constant(Tensor(Shape{1, 3})), {3}), std::out_of_range);
}

TEST(Backward, NonScalarLossIsRejected) {
  ag::Tape tape;
  auto x = tape.leaf(vec({1, 2}), true);
  EXPECT_THROW(tape.backward(ag::mul(x, x)), ShapeError);
}

TEST(Backward, UnreachedLeafHasZeroGradient) {
  ag::Tape tape;
  auto x = tape.leaf(vec({1, 2}), true);
  auto y = tape.leaf(vec({5, 6}), true);
  tape.backward(ag::sum(x));
  EXPECT_EQ(tape.grad(y).storage(), (std::vector<double>{0, 0}));
}

TEST(FiniteDiff, Square) {
  ParameterStore s;
  s.add("x", ParamGroup::Backbone, Tensor::scalar(3.0));
  auto g = finite_diff_gradient([](const ParameterStore& p) { return p.get("x")[0] * p.get("x")[0]; }, s,
                                {"x"}, 1e-5);
  EXPECT_NEAR(g.at("x")[0], 6.0, 1e-6);
  EXPECT_EQ(s.get("x")[0], 3.0);
}

TEST(FiniteDiff, ZeroFunction) {
  ParameterStore s;
  s.add("x", ParamGroup::Backbone, vec({1, -2, 3}));
  auto g = finite_diff_gradient([](const ParameterStore&) { return 0.0; }, s, {"x"}, 1e-5);
  for (double v : g.at("x").data()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, RejectsNonPositiveEpsilon) {
  ParameterStore s;
  s.add("x", ParamGroup::Backbone, vec({1}));
  EXPECT_THROW(finite_diff_gradient([](const ParameterStore&) { return 0.0; }, s, {"x"}, 0.0),
               std::invalid_argument);
}

TEST(FiniteDiff, MatchesBackwardOnTwoLayerNet) {
  std::mt19937_64 rng(11);
  ParameterStore s;
  s.add("w1", ParamGroup::Backbone, random_tensor(Shape{5, 6}, rng));
  s.add("b1", ParamGroup::Backbone, random_tensor(Shape{6}, rng));
  s.add("w2", ParamGroup::Backbone, random_tensor(Shape{6, 3}, rng));
  const Tensor x = random_tensor(Shape{4, 5}, rng);
  auto r = check_gradients(s, {"w1", "b1", "w2"}, [&x](ParamBinding& b) {
    auto h = ag::gelu(ag::add(ag::matmul(b.tape().constant(x), b("w1")), b("b1")));
    return ag::cross_entropy(ag::matmul(h, b("w2")), {0, 1, 2, 1});
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

// Random tiny graphs over every differentiable primitive.
class RandomGraphGradient : public ::testing::TestWithParam<int> {};

TEST_P(RandomGraphGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  const std::size_t n = 2, tokens = 3, d = 4, heads = 2, P = tokens - 1;
  ParameterStore s;
  s.add("patch", ParamGroup::Backbone, random_tensor(Shape{n * P, d}, rng));
  s.add("cls", ParamGroup::Backbone, random_tensor(Shape{d}, rng));
  s.add("pos", ParamGroup::Backbone, random_tensor(Shape{tokens, d}, rng));
  s.add("gamma", ParamGroup::Norm, random_tensor(Shape{d}, rng, 0.5, 1.5));
  s.add("beta", ParamGroup::Norm, random_tensor(Shape{d}, rng));
  s.add("wqkv", ParamGroup::Backbone, random_tensor(Shape{d, 3 * d}, rng));
  s.add("w", ParamGroup::Backbone, random_tensor(Shape{d, 3}, rng));
  s.add("c", ParamGroup::Adapter, random_tensor(Shape{1}, rng, 0.5, 2.0));
  std::vector<std::string> names;
  for (const auto& e : s.entries()) names.push_back(e.name);

  auto r = check_gradients(s, names, [&](ParamBinding& b) {
    auto x = ag::assemble_tokens(b("patch"), b("cls"), b("pos"), n);
    auto h = ag::layer_norm(x, b("gamma"), b("beta"), 1e-6);
    auto a = ag::attention(ag::matmul(h, b("wqkv")), n, tokens, heads);
    auto y = ag::add(x, ag::scale_by(ag::gelu(a), b("c")));
    auto z = ag::take_rows(y, tokens, 0);
    auto p = ag::softmax(ag::matmul(z, b("w")));
    auto pm = ag::mean(ag::reshape(p, Shape{1, n, 3}), 1);
    auto ent = ag::scale(ag::sum(ag::mul(pm, ag::log(pm, 1e-12))), -1.0);
    auto ce = ag::cross_entropy(ag::matmul(ag::relu(ag::scale(z, 2.0)), b("w")), {0, 2});
    return ag::add(ent, ce);
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomGraphGradient, ::testing::Range(0, 8));

TEST(LayerNorm, StandardisesArithmeticSequence) {
  ag::Tape tape;
  auto y = ag::layer_norm(tape.constant(Tensor(Shape{1, 3}, std::vector<double>{1, 2, 3})),
                          tape.constant(Tensor(Shape{3}, 1.0)), tape.constant(Tensor(Shape{3}, 0.0)), 0.0);
  const double s = std::sqrt(1.5);
  EXPECT_NEAR(y.value()[0], -s, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.value()[2], s, 1e-12);
  EXPECT_NEAR(y.value()[2], 1.2247, 1e-4);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(1);
  ag::Tape tape;
  const Tensor beta = random_tensor(Shape{5}, rng);
  auto y = ag::layer_norm(tape.constant(random_tensor(Shape{3, 5}, rng)), tape.constant(Tensor(Shape{5}, 0.0)),
                          tape.constant(beta), 1e-6);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y.value().at(r, c), beta[c]);
  }
}

TEST(LayerNorm, ConstantRowGivesBeta) {
  ag::Tape tape;
  const Tensor beta(Shape{4}, std::vector<double>{0.1, -0.2, 0.3, 0.4});
  auto y = ag::layer_norm(tape.constant(Tensor(Shape{2, 4}, 7.5)), tape.constant(Tensor(Shape{4}, 2.0)),
                          tape.constant(beta), 1e-6);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y.value().at(r, c), beta[c]);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  ParameterStore s;
  s.add("x", ParamGroup::Backbone, random_tensor(Shape{3, 6}, rng));
  s.add("g", ParamGroup::Norm, random_tensor(Shape{6}, rng));
  s.add("b", ParamGroup::Norm, random_tensor(Shape{6}, rng));
  const Tensor w = random_tensor(Shape{3, 6}, rng);
  auto r = check_gradients(s, {"x", "g", "b"}, [&w](ParamBinding& b) {
    auto y = ag::layer_norm(b("x"), b("g"), b("b"), 1e-5);
    return ag::sum(ag::mul(ag::mul(y, y), b.tape().constant(w)));
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Sgd, PlainStep) {
  ParameterStore s;
  s.add("p", ParamGroup::Norm, Tensor::scalar(1.0));
  OptimizerState opt(s, {"p"}, 0.1, 0.0);
  sgd_step(s, {{"p", Tensor::scalar(2.0)}}, opt, 0);
  EXPECT_NEAR(s.get("p")[0], 0.8, 1e-15);
}

TEST(Sgd, MomentumRecurrence) {
  ParameterStore s;
  s.add("p", ParamGroup::Norm, Tensor::scalar(0.0));
  OptimizerState opt(s, {"p"}, 1.0, 0.9);
  sgd_step(s, {{"p", Tensor::scalar(1.0)}}, opt, 0);
  EXPECT_DOUBLE_EQ(s.get("p")[0], -1.0);
  EXPECT_DOUBLE_EQ(opt.velocity().at("p")[0], 1.0);
  sgd_step(s, {{"p", Tensor::scalar(1.0)}}, opt, 1);
  EXPECT_NEAR(opt.velocity().at("p")[0], 1.9, 1e-15);
  EXPECT_NEAR(s.get("p")[0], -2.9, 1e-15);
}

TEST(Sgd, CosineMidpointAndEnd) {
  LrSchedule sched{true, 100};
  EXPECT_NEAR(sched.at(0.01, 50), 0.005, 1e-15);
  EXPECT_DOUBLE_EQ(sched.at(0.01, 0), 0.01);
  EXPECT_EQ(sched.at(0.01, 100), 0.0);
  EXPECT_DOUBLE_EQ(LrSchedule{}.at(0.01, 70), 0.01);
}

TEST(Sgd, ShapeMismatchIsRejected) {
  ParameterStore s;
  s.add("p", ParamGroup::Norm, Tensor(Shape{3}, 0.0));
  OptimizerState opt(s, {"p"}, 0.1, 0.9);
  EXPECT_THROW(sgd_step(s, {{"p", Tensor(Shape{2}, 1.0)}}, opt, 0), ShapeError);
  EXPECT_THROW(sgd_step(s, {}, opt, 0), std::invalid_argument);
}

TEST(Sgd, IsDeterministic) {
  std::mt19937_64 rng(8);
  ParameterStore a;
  a.add("p", ParamGroup::Norm, random_tensor(Shape{10}, rng));
  ParameterStore b = a;
  const GradientMap g{{"p", random_tensor(Shape{10}, rng)}};
  OptimizerState oa(a, {"p"}, 0.03, 0.9), ob(b, {"p"}, 0.03, 0.9);
  for (std::size_t k = 0; k < 3; ++k) {
    sgd_step(a, g, oa, k);
    sgd_step(b, g, ob, k);
  }
  EXPECT_TRUE(bitwise_equal(a.get("p"), b.get("p")));
}

TEST(Sgd, ZeroGradientWithZeroVelocityLeavesParameter) {
  std::mt19937_64 rng(9);
  ParameterStore s;
  s.add("p", ParamGroup::Norm, random_tensor(Shape{6}, rng));
  const Tensor before = s.get("p");
  OptimizerState opt(s, {"p"}, 0.5, 0.9);
  sgd_step(s, {{"p", Tensor(Shape{6}, 0.0)}}, opt, 0);
  EXPECT_TRUE(bitwise_equal(before, s.get("p")));
}

TEST(Sgd, RejectsBadHyperparameters) {
  ParameterStore s;
  s.add("p", ParamGroup::Norm, Tensor::scalar(0.0));
  EXPECT_THROW(OptimizerState(s, {"p"}, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(OptimizerState(s, {"p"}, -0.1, 0.5), std::invalid_argument);
}

TEST(Kernels, BlockedGemmMatchesNaiveLoopBitwise) {
  std::mt19937_64 rng(21);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 5, 7}, {9, 70, 130}, {17, 64, 65}}) {
    const Tensor a = random_tensor(Shape{m, k}, rng), b = random_tensor(Shape{k, n}, rng);
    Tensor c(Shape{m, n}), ref(Shape{m, n});
    kernels::gemm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n, false);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
        ref.at(i, j) = acc;
      }
    }
    EXPECT_TRUE(bitwise_equal(c, ref)) << m << "x" << k << "x" << n;
  }
}
