#include "asl/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>

namespace asl::grad {

namespace {

using Rng = std::mt19937_64;

struct Case {
  Graph graph;
  Bindings bindings;
};

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Reduces any node to a scalar loss with random weights so no gradient is trivially constant.
NodeId weighted_sum(Case& c, NodeId node, const Shape& shape, Rng& rng) {
  const NodeId w = c.graph.constant(random_tensor(shape, rng));
  return c.graph.sum(c.graph.mul(node, w));
}

NodeId bound_input(Case& c, Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  const NodeId id = c.graph.input("x" + std::to_string(c.graph.size()), shape);
  c.bindings.emplace(id, random_tensor(shape, rng, lo, hi));
  return id;
}

NodeId bound_parameter(Case& c, Shape shape, Rng& rng) {
  const NodeId id = c.graph.parameter("p" + std::to_string(c.graph.size()), shape);
  c.bindings.emplace(id, random_tensor(shape, rng));
  return id;
}

Case build_case(const std::string& name, Rng& rng) {
  Case c;
  const Shape shape{pick(rng, 1, 4), pick(rng, 2, 5)};
  NodeId loss = 0;

  auto elementwise = [&](std::function<NodeId(NodeId)> op, double lo, double hi) {
    const NodeId x = bound_input(c, shape, rng, lo, hi);
    return weighted_sum(c, op(x), shape, rng);
  };
  auto binary = [&](std::function<NodeId(NodeId, NodeId)> op, double blo, double bhi) {
    const NodeId a = bound_input(c, shape, rng);
    const NodeId b = bound_parameter(c, shape, rng);
    // Second operand re-bound into [blo, bhi] for ops with a restricted domain.
    c.bindings[b] = random_tensor(shape, rng, blo, bhi);
    return weighted_sum(c, op(a, b), shape, rng);
  };

  Graph& g = c.graph;
  if (name == "add") {
    loss = binary([&](NodeId a, NodeId b) { return g.add(a, b); }, -2, 2);
  } else if (name == "sub") {
    loss = binary([&](NodeId a, NodeId b) { return g.sub(a, b); }, -2, 2);
  } else if (name == "mul") {
    loss = binary([&](NodeId a, NodeId b) { return g.mul(a, b); }, -2, 2);
  } else if (name == "div") {
    loss = binary([&](NodeId a, NodeId b) { return g.div(a, b); }, 0.5, 2);
  } else if (name == "scale") {
    const double k = std::uniform_real_distribution<double>(-2, 2)(rng);
    loss = elementwise([&](NodeId x) { return g.scale(x, k); }, -2, 2);
  } else if (name == "add_scalar") {
    const double k = std::uniform_real_distribution<double>(-2, 2)(rng);
    loss = elementwise([&](NodeId x) { return g.mul(g.add_scalar(x, k), x); }, -2, 2);
  } else if (name == "reciprocal") {
    loss = elementwise([&](NodeId x) { return g.reciprocal(x); }, 0.5, 2);
  } else if (name == "log") {
    loss = elementwise([&](NodeId x) { return g.log(x); }, 0.5, 2);
  } else if (name == "exp") {
    loss = elementwise([&](NodeId x) { return g.exp(x); }, -2, 2);
  } else if (name == "tanh") {
    loss = elementwise([&](NodeId x) { return g.tanh(x); }, -2, 2);
  } else if (name == "relu") {
    loss = elementwise([&](NodeId x) { return g.relu(x); }, -2, 2);
  } else if (name == "affine" || name == "mlp") {
    const std::size_t B = pick(rng, 1, 4), I = pick(rng, 1, 4), H = pick(rng, 2, 4), O = pick(rng, 2, 4);
    const NodeId x = bound_input(c, {B, I}, rng);
    const NodeId w1 = bound_parameter(c, {I, H}, rng);
    const NodeId b1 = bound_parameter(c, {H}, rng);
    const NodeId h = g.affine(x, w1, b1);
    if (name == "affine") {
      loss = weighted_sum(c, h, {B, H}, rng);
    } else {
      const NodeId w2 = bound_parameter(c, {H, O}, rng);
      const NodeId b2 = bound_parameter(c, {O}, rng);
      const NodeId logits = g.affine(g.tanh(h), w2, b2);
      std::vector<std::size_t> labels(B);
      for (auto& l : labels) l = pick(rng, 0, O - 1);
      loss = g.scale(g.mean(g.pick_per_row(g.log_softmax(logits), labels)), -1.0);
    }
  } else if (name == "patch_gather") {
    PatchGeometry geo;
    geo.channels = pick(rng, 1, 2);
    geo.height = pick(rng, 2, 4);
    geo.width = pick(rng, 2, 4);
    geo.radius = pick(rng, 0, 2);
    const std::size_t n = geo.height * geo.width;
    for (std::size_t p = 0; p < n; ++p) {
      if (pick(rng, 0, 1) || geo.centers.empty()) geo.centers.push_back(p);
    }
    const Shape out{geo.centers.size(), geo.row_width()};
    const NodeId img = bound_input(c, {geo.channels, geo.height, geo.width}, rng);
    loss = weighted_sum(c, g.patch_gather(img, geo), out, rng);
  } else if (name == "softmax") {
    loss = elementwise([&](NodeId x) { return g.softmax(x); }, -2, 2);
  } else if (name == "log_softmax") {
    loss = elementwise([&](NodeId x) { return g.log_softmax(x); }, -2, 2);
  } else if (name == "pick_per_row") {
    std::vector<std::size_t> cols(shape[0]);
    for (auto& col : cols) col = pick(rng, 0, shape[1] - 1);
    const NodeId x = bound_input(c, shape, rng);
    loss = weighted_sum(c, g.pick_per_row(g.mul(x, x), cols), {shape[0]}, rng);
  } else if (name == "row_sum") {
    const NodeId x = bound_input(c, shape, rng);
    loss = weighted_sum(c, g.row_sum(g.mul(x, x)), {shape[0]}, rng);
  } else if (name == "sum" || name == "mean") {
    const NodeId x = bound_input(c, shape, rng);
    const NodeId sq = g.tanh(x);
    loss = name == "sum" ? g.sum(sq) : g.mean(sq);
  } else if (name == "masked_mean") {
    const NodeId x = bound_input(c, shape, rng);
    std::vector<std::uint8_t> mask(shape_numel(shape));
    for (auto& m : mask) m = static_cast<std::uint8_t>(pick(rng, 0, 1));
    loss = g.masked_mean(g.mul(x, x), mask);
  } else {
    throw InvalidArgument("unknown gradcheck primitive '" + name + "'");
  }
  g.set_loss(loss);
  return c;
}

}  // namespace

std::vector<std::string> suite_primitives() {
  return {"add",     "sub",          "mul",     "div",         "scale",        "add_scalar", "reciprocal",
          "log",     "exp",          "tanh",    "relu",        "affine",       "patch_gather", "softmax",
          "log_softmax", "pick_per_row", "row_sum", "sum",      "mean",         "masked_mean", "mlp"};
}

SuiteResult run_gradcheck_suite(const SuiteOptions& options) {
  SuiteResult result;
  for (std::size_t p = 0; p < options.primitives.size(); ++p) {
    PrimitiveResult pr;
    pr.name = options.primitives[p];
    for (std::size_t k = 0; k < options.graphs_per_primitive; ++k) {
      std::seed_seq seq{options.seed, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(k)};
      Rng rng(seq);
      Case c = build_case(pr.name, rng);
      GradCheckOptions gco;
      gco.seed = options.seed + k;
      gco.fault = options.fault;
      pr.max_error = std::max(pr.max_error, grad_check(c.graph, c.bindings, options.epsilon, gco));
      ++pr.graphs;
    }
    result.graphs += pr.graphs;
    result.max_error = std::max(result.max_error, pr.max_error);
    result.primitives.push_back(std::move(pr));
  }
  return result;
}

}  // namespace asl::grad
