#pragma once

// Reverse-mode automatic differentiation over a static graph of dense tensor
// primitives. A Graph is built once, then evaluated by forward() for any set of
// bindings and differentiated by backward() against its designated loss node.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "asl/error.hpp"
#include "asl/tensor.hpp"

namespace asl::grad {

using NodeId = std::size_t;

enum class OpKind {
  kInput,
  kParameter,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddScalar,
  kReciprocal,
  kLog,
  kExp,
  kTanh,
  kRelu,
  kAffine,
  kPatchGather,
  kSoftmax,
  kLogSoftmax,
  kPickPerRow,
  kRowSum,
  kSum,
  kMean,
  kMaskedMean,
};

std::string_view op_name(OpKind kind);

/// Geometry of a patch-gather node: a C×H×W image is sampled at `centers`
/// (flat h*W+w indices) with a (2r+1)×(2r+1) window and edge replication.
/// Output row p holds the window of centers[p] in (channel, dy, dx) order.
struct PatchGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t radius = 0;
  std::vector<std::size_t> centers;

  std::size_t window() const { return 2 * radius + 1; }
  std::size_t row_width() const { return channels * window() * window(); }
};

struct Node {
  OpKind kind = OpKind::kInput;
  std::vector<NodeId> inputs;
  std::string name;
  Shape declared_shape;                 // input / parameter nodes
  Tensor constant;                      // constant nodes
  double scalar = 0.0;                  // scale, add-scalar, log floor
  std::vector<std::size_t> indices;     // pick-per-row
  std::vector<std::uint8_t> mask;       // masked-mean
  PatchGeometry patch;                  // patch-gather
};

/// Raised by forward/backward. Names the offending node.
class GraphError : public Error {
 public:
  GraphError(NodeId node, const std::string& what)
      : Error("node " + std::to_string(node) + ": " + what), node_(node) {}
  NodeId node() const noexcept { return node_; }

 private:
  NodeId node_;
};

/// Append-only builder; every node's inputs exist before it, so insertion
/// order is a topological order.
class Graph {
 public:
  NodeId input(std::string name, Shape shape);
  NodeId parameter(std::string name, Shape shape);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId add_scalar(NodeId a, double offset);
  NodeId reciprocal(NodeId a);
  /// log(max(a, floor)); the derivative is zero where the floor is active.
  NodeId log(NodeId a, double floor = 1e-12);
  NodeId exp(NodeId a);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);

  /// x[B,I] · w[I,O] + b[O]
  NodeId affine(NodeId x, NodeId w, NodeId b);
  NodeId patch_gather(NodeId image, PatchGeometry geometry);

  /// Row-wise over the last axis of a rank-1 or rank-2 tensor.
  NodeId softmax(NodeId logits);
  NodeId log_softmax(NodeId logits);

  /// out[b] = a[b, columns[b]]
  NodeId pick_per_row(NodeId a, std::vector<std::size_t> columns);
  NodeId row_sum(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  /// Mean over entries with mask != 0; 0 with zero gradient when the mask is empty.
  NodeId masked_mean(NodeId a, std::vector<std::uint8_t> mask);

  void set_loss(NodeId node);
  std::optional<NodeId> loss() const noexcept { return loss_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

 private:
  NodeId push(Node node);
  void require(NodeId id) const;

  std::vector<Node> nodes_;
  std::optional<NodeId> loss_;
};

using Bindings = std::unordered_map<NodeId, Tensor>;
/// Value of every node, indexed by NodeId.
using Values = std::vector<Tensor>;

struct GradientBundle {
  std::map<NodeId, Tensor> parameter_grads;
  std::map<NodeId, Tensor> input_grads;
};

/// Test hook: scales the input adjoints produced by every node of `op`.
struct FaultInjection {
  OpKind op = OpKind::kAdd;
  double factor = 1.5;
};

Values forward(const Graph& graph, const Bindings& bindings);

GradientBundle backward(const Graph& graph, const Values& values, NodeId loss,
                        const FaultInjection* fault = nullptr);
GradientBundle backward(const Graph& graph, const Values& values,
                        const FaultInjection* fault = nullptr);

struct GradCheckOptions {
  /// Coordinates checked per bound tensor; larger tensors are subsampled.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 0;
  const FaultInjection* fault = nullptr;
};

/// Max over checked coordinates of |autodiff - central difference| / max(1, |central difference|).
double grad_check(const Graph& graph, const Bindings& bindings, double epsilon,
                  const GradCheckOptions& options = {});

}  // namespace asl::grad
