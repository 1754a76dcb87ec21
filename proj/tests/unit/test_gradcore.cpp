#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "asl/gradcheck_suite.hpp"
#include "asl/graph.hpp"

namespace asl::grad {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InvalidArgument);
  EXPECT_THROW(Tensor({0, 2}), InvalidArgument);
}

TEST(Forward, IdentityGraph) {
  Graph g;
  const NodeId x = g.input("x", {3});
  const Values v = forward(g, {{x, Tensor::vector({1, 2, 3})}});
  EXPECT_EQ(v[x], Tensor::vector({1, 2, 3}));
}

TEST(Forward, SoftmaxOfEqualLogitsIsHalf) {
  Graph g;
  const NodeId x = g.input("x", {2});
  const NodeId s = g.softmax(x);
  const Values v = forward(g, {{x, Tensor::vector({0, 0})}});
  EXPECT_DOUBLE_EQ(v[s][0], 0.5);
  EXPECT_DOUBLE_EQ(v[s][1], 0.5);
}

TEST(Forward, SoftmaxOfOneZero) {
  Graph g;
  const NodeId x = g.input("x", {2});
  const NodeId s = g.softmax(x);
  const Values v = forward(g, {{x, Tensor::vector({1, 0})}});
  // e / (e + 1) and 1 / (e + 1), evaluated by hand.
  EXPECT_NEAR(v[s][0], 0.7311, 1e-4);
  EXPECT_NEAR(v[s][1], 0.2689, 1e-4);
}

TEST(Forward, RejectsShapeMismatchNamingNode) {
  Graph g;
  const NodeId x = g.input("x", {3});
  try {
    forward(g, {{x, Tensor::vector({1, 2})}});
    FAIL() << "expected GraphError";
  } catch (const GraphError& e) {
    EXPECT_EQ(e.node(), x);
  }
}

TEST(Forward, RejectsUnboundInput) {
  Graph g;
  g.input("x", {3});
  EXPECT_THROW(forward(g, {}), GraphError);
}

TEST(Forward, RejectsNonFiniteIntermediate) {
  Graph g;
  const NodeId x = g.input("x", {1});
  const NodeId e = g.exp(x);
  try {
    forward(g, {{x, Tensor::vector({1000})}});
    FAIL() << "expected GraphError";
  } catch (const GraphError& err) {
    EXPECT_EQ(err.node(), e);
  }
}

TEST(Forward, IsPure) {
  std::mt19937_64 rng(3);
  Graph g;
  const NodeId x = g.input("x", {4, 5});
  const NodeId w = g.parameter("w", {5, 3});
  const NodeId b = g.parameter("b", {3});
  const NodeId loss = g.mean(g.log_softmax(g.affine(g.tanh(x), w, b)));
  g.set_loss(loss);
  const Bindings bind{{x, random_tensor({4, 5}, rng)}, {w, random_tensor({5, 3}, rng)}, {b, random_tensor({3}, rng)}};
  const Values a = forward(g, bind);
  const Values c = forward(g, bind);
  EXPECT_EQ(a, c);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  const NodeId x = g.input("x", {3});
  g.set_loss(g.sum(x));
  const Values v = forward(g, {{x, Tensor::vector({4, -1, 2})}});
  const GradientBundle grads = backward(g, v);
  EXPECT_EQ(grads.input_grads.at(x), Tensor::vector({1, 1, 1}));
}

TEST(Backward, HalfSquare) {
  Graph g;
  const NodeId x = g.input("x", {1});
  g.set_loss(g.scale(g.mul(x, x), 0.5));
  const Values v = forward(g, {{x, Tensor::vector({3})}});
  EXPECT_DOUBLE_EQ(backward(g, v).input_grads.at(x)[0], 3.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph g;
  const NodeId x = g.input("x", {3});
  const Values v = forward(g, {{x, Tensor::vector({1, 2, 3})}});
  EXPECT_THROW(backward(g, v, x), GraphError);
}

TEST(Backward, RequiresLoss) {
  Graph g;
  const NodeId x = g.input("x", {3});
  const Values v = forward(g, {{x, Tensor::vector({1, 2, 3})}});
  EXPECT_THROW(backward(g, v), InvalidArgument);
}

TEST(Backward, GradientShapesMatchPrimals) {
  std::mt19937_64 rng(5);
  Graph g;
  const NodeId x = g.input("x", {3, 4});
  const NodeId w = g.parameter("w", {4, 2});
  const NodeId b = g.parameter("b", {2});
  g.set_loss(g.sum(g.softmax(g.affine(x, w, b))));
  const Values v = forward(g, {{x, random_tensor({3, 4}, rng)}, {w, random_tensor({4, 2}, rng)},
                               {b, random_tensor({2}, rng)}});
  const GradientBundle grads = backward(g, v);
  EXPECT_EQ(grads.input_grads.at(x).shape(), (Shape{3, 4}));
  EXPECT_EQ(grads.parameter_grads.at(w).shape(), (Shape{4, 2}));
  EXPECT_EQ(grads.parameter_grads.at(b).shape(), (Shape{2}));
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  // 2 inputs -> 2 hidden -> 2 classes: 6 + 4 = 10 parameters.
  std::mt19937_64 rng(11);
  Graph g;
  const NodeId x = g.input("x", {3, 2});
  const NodeId w1 = g.parameter("w1", {2, 2});
  const NodeId b1 = g.parameter("b1", {2});
  const NodeId w2 = g.parameter("w2", {2, 1});
  const NodeId b2 = g.parameter("b2", {1});
  const NodeId h = g.tanh(g.affine(x, w1, b1));
  const NodeId out = g.affine(h, w2, b2);
  g.set_loss(g.mean(g.mul(out, out)));
  const Bindings bind{{x, random_tensor({3, 2}, rng)},
                      {w1, random_tensor({2, 2}, rng)},
                      {b1, random_tensor({2}, rng)},
                      {w2, random_tensor({2, 1}, rng)},
                      {b2, random_tensor({1}, rng)}};
  const Values v = forward(g, bind);
  const GradientBundle grads = backward(g, v);
  for (const NodeId p : {w1, b1, w2, b2}) {
    for (std::size_t i = 0; i < bind.at(p).numel(); ++i) {
      Bindings plus = bind;
      Bindings minus = bind;
      const double eps = 1e-5;
      plus[p][i] += eps;
      minus[p][i] -= eps;
      const double lp = forward(g, plus)[*g.loss()].item();
      const double lm = forward(g, minus)[*g.loss()].item();
      const double fd = (lp - lm) / (2 * eps);
      EXPECT_LE(std::abs(grads.parameter_grads.at(p)[i] - fd) / std::max(1.0, std::abs(fd)), 1e-4);
    }
  }
}

TEST(Backward, LinearityOfSummedLosses) {
  std::mt19937_64 rng(17);
  auto build = [&](Graph& g, NodeId& x, NodeId& w, int which) {
    x = g.input("x", {4, 3});
    w = g.parameter("w", {3, 3});
    const NodeId b = g.constant(Tensor({3}, 0.0));
    const NodeId z = g.affine(x, w, b);
    const NodeId l1 = g.mean(g.softmax(g.mul(z, z)));
    const NodeId l2 = g.sum(g.tanh(z));
    g.set_loss(which == 0 ? g.add(l1, l2) : which == 1 ? l1 : l2);
  };
  const Tensor xv = random_tensor({4, 3}, rng);
  const Tensor wv = random_tensor({3, 3}, rng);
  std::vector<GradientBundle> grads;
  for (int which = 0; which < 3; ++which) {
    Graph g;
    NodeId x = 0;
    NodeId w = 0;
    build(g, x, w, which);
    grads.push_back(backward(g, forward(g, {{x, xv}, {w, wv}})));
  }
  for (const auto& [id, total] : grads[0].parameter_grads) {
    for (std::size_t i = 0; i < total.numel(); ++i) {
      EXPECT_NEAR(total[i], grads[1].parameter_grads.at(id)[i] + grads[2].parameter_grads.at(id)[i], 1e-12);
    }
  }
}

TEST(Backward, MaskedMeanGradientIsZeroOutsideMask) {
  Graph g;
  const NodeId x = g.input("x", {4});
  g.set_loss(g.masked_mean(g.mul(x, x), {1, 0, 1, 0}));
  const Values v = forward(g, {{x, Tensor::vector({1, 2, 3, 4})}});
  const Tensor gx = backward(g, v).input_grads.at(x);
  EXPECT_DOUBLE_EQ(gx[0], 1.0);
  EXPECT_EQ(gx[1], 0.0);
  EXPECT_DOUBLE_EQ(gx[2], 3.0);
  EXPECT_EQ(gx[3], 0.0);
}

TEST(Backward, EmptyMaskGivesZero) {
  Graph g;
  const NodeId x = g.input("x", {2});
  g.set_loss(g.masked_mean(x, {0, 0}));
  const Values v = forward(g, {{x, Tensor::vector({1, 2})}});
  EXPECT_EQ(v[*g.loss()].item(), 0.0);
  EXPECT_EQ(backward(g, v).input_grads.at(x), Tensor::vector({0, 0}));
}

TEST(GradCheck, LinearGraphIsExact) {
  std::mt19937_64 rng(1);
  Graph g;
  const NodeId x = g.input("x", {3, 2});
  const NodeId w = g.parameter("w", {2, 4});
  const NodeId b = g.parameter("b", {4});
  g.set_loss(g.sum(g.scale(g.affine(x, w, b), 0.5)));
  const Bindings bind{{x, random_tensor({3, 2}, rng)}, {w, random_tensor({2, 4}, rng)}, {b, random_tensor({4}, rng)}};
  EXPECT_LE(grad_check(g, bind, 1e-5), 1e-9);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(2);
  Graph g;
  const NodeId x = g.input("x", {5, 4});
  const NodeId w = g.parameter("w", {4, 3});
  const NodeId b = g.parameter("b", {3});
  const NodeId lp = g.log_softmax(g.affine(x, w, b));
  g.set_loss(g.scale(g.mean(g.pick_per_row(lp, {0, 1, 2, 1, 0})), -1.0));
  const Bindings bind{{x, random_tensor({5, 4}, rng)}, {w, random_tensor({4, 3}, rng)}, {b, random_tensor({3}, rng)}};
  EXPECT_LE(grad_check(g, bind, 1e-5), 1e-4);
}

TEST(GradCheck, ConstantGraphHasZeroError) {
  Graph g;
  const NodeId x = g.input("x", {3});
  const NodeId c = g.constant(Tensor::vector({1, 2, 3}));
  g.set_loss(g.add(g.sum(c), g.scale(g.sum(x), 0.0)));
  EXPECT_EQ(grad_check(g, {{x, Tensor::vector({1, 1, 1})}}, 1e-5), 0.0);
}

TEST(GradCheck, RejectsBadEpsilon) {
  Graph g;
  const NodeId x = g.input("x", {1});
  g.set_loss(g.sum(x));
  EXPECT_THROW(grad_check(g, {{x, Tensor::vector({1})}}, 0.0), InvalidArgument);
  EXPECT_THROW(grad_check(g, {{x, Tensor::vector({1})}}, 0.1), InvalidArgument);
}

TEST(GradCheck, DetectsInjectedFault) {
  std::mt19937_64 rng(4);
  Graph g;
  const NodeId x = g.input("x", {3});
  g.set_loss(g.sum(g.tanh(x)));
  const FaultInjection fault{OpKind::kTanh, 1.5};
  GradCheckOptions opts;
  opts.fault = &fault;
  EXPECT_GT(grad_check(g, {{x, random_tensor({3}, rng)}}, 1e-5, opts), 1e-2);
}

TEST(Suite, EveryPrimitiveOverAtLeastHundredGraphs) {
  const SuiteResult r = run_gradcheck_suite(SuiteOptions{});
  EXPECT_GE(r.graphs, 100u);
  for (const PrimitiveResult& p : r.primitives) EXPECT_LE(p.max_error, 1e-4) << p.name;
  EXPECT_LE(r.max_error, 1e-4);
}

TEST(Suite, FaultFailsOnlyItsPrimitive) {
  const FaultInjection fault{OpKind::kTanh, 1.5};
  SuiteOptions opts;
  opts.primitives = {"tanh", "relu"};
  opts.fault = &fault;
  const SuiteResult r = run_gradcheck_suite(opts);
  EXPECT_GT(r.primitives[0].max_error, 1e-4);
  EXPECT_LE(r.primitives[1].max_error, 1e-4);
}

TEST(Suite, UnknownPrimitiveRejected) {
  SuiteOptions opts;
  opts.primitives = {"nope"};
  EXPECT_THROW(run_gradcheck_suite(opts), InvalidArgument);
}

}  // namespace
}  // namespace asl::grad
