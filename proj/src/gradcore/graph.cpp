#include "asl/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace asl::grad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kAffine: return "affine";
    case OpKind::kPatchGather: return "patch_gather";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kPickPerRow: return "pick_per_row";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMaskedMean: return "masked_mean";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Builder

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs) require(in);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

void Graph::require(NodeId id) const {
  if (id >= nodes_.size()) throw InvalidArgument("graph has no node " + std::to_string(id));
}

NodeId Graph::input(std::string name, Shape shape) {
  Node n;
  n.kind = OpKind::kInput;
  n.name = std::move(name);
  n.declared_shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::parameter(std::string name, Shape shape) {
  Node n;
  n.kind = OpKind::kParameter;
  n.name = std::move(name);
  n.declared_shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.constant = std::move(value);
  return push(std::move(n));
}

namespace {

Node unary(OpKind kind, NodeId a, double scalar = 0.0) {
  Node n;
  n.kind = kind;
  n.inputs = {a};
  n.scalar = scalar;
  return n;
}

Node binary(OpKind kind, NodeId a, NodeId b) {
  Node n;
  n.kind = kind;
  n.inputs = {a, b};
  return n;
}

}  // namespace

NodeId Graph::add(NodeId a, NodeId b) { return push(binary(OpKind::kAdd, a, b)); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(binary(OpKind::kSub, a, b)); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(binary(OpKind::kMul, a, b)); }
NodeId Graph::div(NodeId a, NodeId b) { return push(binary(OpKind::kDiv, a, b)); }
NodeId Graph::scale(NodeId a, double factor) { return push(unary(OpKind::kScale, a, factor)); }
NodeId Graph::add_scalar(NodeId a, double offset) { return push(unary(OpKind::kAddScalar, a, offset)); }
NodeId Graph::reciprocal(NodeId a) { return push(unary(OpKind::kReciprocal, a)); }
NodeId Graph::log(NodeId a, double floor) {
  if (!(floor > 0.0)) throw InvalidArgument("log floor must be positive");
  return push(unary(OpKind::kLog, a, floor));
}
NodeId Graph::exp(NodeId a) { return push(unary(OpKind::kExp, a)); }
NodeId Graph::tanh(NodeId a) { return push(unary(OpKind::kTanh, a)); }
NodeId Graph::relu(NodeId a) { return push(unary(OpKind::kRelu, a)); }

NodeId Graph::affine(NodeId x, NodeId w, NodeId b) {
  Node n;
  n.kind = OpKind::kAffine;
  n.inputs = {x, w, b};
  return push(std::move(n));
}

NodeId Graph::patch_gather(NodeId image, PatchGeometry geometry) {
  if (geometry.channels == 0 || geometry.height == 0 || geometry.width == 0) {
    throw InvalidArgument("patch geometry extents must be positive");
  }
  if (geometry.centers.empty()) throw InvalidArgument("patch gather needs at least one center");
  const std::size_t pixels = geometry.height * geometry.width;
  for (std::size_t c : geometry.centers) {
    if (c >= pixels) throw InvalidArgument("patch center " + std::to_string(c) + " outside image");
  }
  Node n;
  n.kind = OpKind::kPatchGather;
  n.inputs = {image};
  n.patch = std::move(geometry);
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId logits) { return push(unary(OpKind::kSoftmax, logits)); }
NodeId Graph::log_softmax(NodeId logits) { return push(unary(OpKind::kLogSoftmax, logits)); }

NodeId Graph::pick_per_row(NodeId a, std::vector<std::size_t> columns) {
  Node n = unary(OpKind::kPickPerRow, a);
  n.indices = std::move(columns);
  return push(std::move(n));
}

NodeId Graph::row_sum(NodeId a) { return push(unary(OpKind::kRowSum, a)); }
NodeId Graph::sum(NodeId a) { return push(unary(OpKind::kSum, a)); }
NodeId Graph::mean(NodeId a) { return push(unary(OpKind::kMean, a)); }

NodeId Graph::masked_mean(NodeId a, std::vector<std::uint8_t> mask) {
  Node n = unary(OpKind::kMaskedMean, a);
  n.mask = std::move(mask);
  return push(std::move(n));
}

void Graph::set_loss(NodeId node) {
  require(node);
  loss_ = node;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView rows_of(const Tensor& t, NodeId id) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw GraphError(id, "expected a rank-1 or rank-2 operand, got " + shape_string(t.shape()));
}

void same_shape(const Tensor& a, const Tensor& b, NodeId id) {
  if (a.shape() != b.shape()) {
    throw GraphError(id, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void softmax_rows(std::span<const double> in, std::span<double> out, RowView v) {
  for (std::size_t r = 0; r < v.rows; ++r) {
    const double* x = in.data() + r * v.cols;
    double* y = out.data() + r * v.cols;
    const double m = *std::max_element(x, x + v.cols);
    double z = 0.0;
    for (std::size_t j = 0; j < v.cols; ++j) {
      y[j] = std::exp(x[j] - m);
      z += y[j];
    }
    for (std::size_t j = 0; j < v.cols; ++j) y[j] /= z;
  }
}

void log_softmax_rows(std::span<const double> in, std::span<double> out, RowView v) {
  for (std::size_t r = 0; r < v.rows; ++r) {
    const double* x = in.data() + r * v.cols;
    double* y = out.data() + r * v.cols;
    const double m = *std::max_element(x, x + v.cols);
    double z = 0.0;
    for (std::size_t j = 0; j < v.cols; ++j) z += std::exp(x[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < v.cols; ++j) y[j] = x[j] - lse;
  }
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

Tensor gather_patches(const Tensor& image, const PatchGeometry& g) {
  const std::size_t k = g.window();
  const std::size_t width = g.row_width();
  Tensor out({g.centers.size(), width});
  auto src = image.data();
  auto dst = out.data();
  const auto r = static_cast<std::ptrdiff_t>(g.radius);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t p = 0; p < g.centers.size(); ++p) {
    const auto h0 = static_cast<std::ptrdiff_t>(g.centers[p] / g.width);
    const auto w0 = static_cast<std::ptrdiff_t>(g.centers[p] % g.width);
    double* row = dst.data() + p * width;
    std::size_t col = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double* plane = src.data() + c * g.height * g.width;
      for (std::size_t dy = 0; dy < k; ++dy) {
        const std::ptrdiff_t h = std::clamp<std::ptrdiff_t>(h0 + static_cast<std::ptrdiff_t>(dy) - r, 0, H - 1);
        for (std::size_t dx = 0; dx < k; ++dx) {
          const std::ptrdiff_t w = std::clamp<std::ptrdiff_t>(w0 + static_cast<std::ptrdiff_t>(dx) - r, 0, W - 1);
          row[col++] = plane[h * W + w];
        }
      }
    }
  }
  return out;
}

void scatter_patches(std::span<const double> grad_rows, const PatchGeometry& g, std::span<double> image_grad,
                     double factor) {
  const std::size_t k = g.window();
  const std::size_t width = g.row_width();
  const auto r = static_cast<std::ptrdiff_t>(g.radius);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t p = 0; p < g.centers.size(); ++p) {
    const auto h0 = static_cast<std::ptrdiff_t>(g.centers[p] / g.width);
    const auto w0 = static_cast<std::ptrdiff_t>(g.centers[p] % g.width);
    const double* row = grad_rows.data() + p * width;
    std::size_t col = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
      double* plane = image_grad.data() + c * g.height * g.width;
      for (std::size_t dy = 0; dy < k; ++dy) {
        const std::ptrdiff_t h = std::clamp<std::ptrdiff_t>(h0 + static_cast<std::ptrdiff_t>(dy) - r, 0, H - 1);
        for (std::size_t dx = 0; dx < k; ++dx) {
          const std::ptrdiff_t w = std::clamp<std::ptrdiff_t>(w0 + static_cast<std::ptrdiff_t>(dx) - r, 0, W - 1);
          plane[h * W + w] += factor * row[col++];
        }
      }
    }
  }
}

Tensor eval_node(const Graph& graph, NodeId id, const Values& values, const Bindings& bindings) {
  const Node& n = graph.node(id);
  auto in = [&](std::size_t i) -> const Tensor& { return values[n.inputs[i]]; };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter: {
      auto it = bindings.find(id);
      if (it == bindings.end()) throw GraphError(id, "unbound " + std::string(op_name(n.kind)) + " '" + n.name + "'");
      if (!n.declared_shape.empty() && it->second.shape() != n.declared_shape) {
        throw GraphError(id, "binding for '" + n.name + "' has shape " + shape_string(it->second.shape()) +
                                 ", declared " + shape_string(n.declared_shape));
      }
      return it->second;
    }
    case OpKind::kConstant:
      return n.constant;
    case OpKind::kAdd:
      same_shape(in(0), in(1), id);
      return map_binary(in(0), in(1), [](double a, double b) { return a + b; });
    case OpKind::kSub:
      same_shape(in(0), in(1), id);
      return map_binary(in(0), in(1), [](double a, double b) { return a - b; });
    case OpKind::kMul:
      same_shape(in(0), in(1), id);
      return map_binary(in(0), in(1), [](double a, double b) { return a * b; });
    case OpKind::kDiv:
      same_shape(in(0), in(1), id);
      return map_binary(in(0), in(1), [](double a, double b) { return a / b; });
    case OpKind::kScale: {
      const double c = n.scalar;
      return map_unary(in(0), [c](double a) { return a * c; });
    }
    case OpKind::kAddScalar: {
      const double c = n.scalar;
      return map_unary(in(0), [c](double a) { return a + c; });
    }
    case OpKind::kReciprocal:
      return map_unary(in(0), [](double a) { return 1.0 / a; });
    case OpKind::kLog: {
      const double floor = n.scalar;
      return map_unary(in(0), [floor](double a) { return std::log(std::max(a, floor)); });
    }
    case OpKind::kExp:
      return map_unary(in(0), [](double a) { return std::exp(a); });
    case OpKind::kTanh:
      return map_unary(in(0), [](double a) { return std::tanh(a); });
    case OpKind::kRelu:
      return map_unary(in(0), [](double a) { return a > 0.0 ? a : 0.0; });
    case OpKind::kAffine: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Tensor& b = in(2);
      if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0)) {
        throw GraphError(id, "affine shapes incompatible: x" + shape_string(x.shape()) + " w" +
                                 shape_string(w.shape()) + " b" + shape_string(b.shape()));
      }
      const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(1);
      Tensor out({B, O});
      auto xs = x.data();
      auto ws = w.data();
      auto bs = b.data();
      auto ys = out.data();
      for (std::size_t r = 0; r < B; ++r) {
        double* y = ys.data() + r * O;
        std::copy(bs.begin(), bs.end(), y);
        const double* xr = xs.data() + r * I;
        for (std::size_t i = 0; i < I; ++i) {
          const double xv = xr[i];
          const double* wr = ws.data() + i * O;
          for (std::size_t o = 0; o < O; ++o) y[o] += xv * wr[o];
        }
      }
      return out;
    }
    case OpKind::kPatchGather: {
      const Tensor& image = in(0);
      const PatchGeometry& g = n.patch;
      if (image.shape() != Shape{g.channels, g.height, g.width}) {
        throw GraphError(id, "patch gather expects image " + shape_string({g.channels, g.height, g.width}) +
                                 ", got " + shape_string(image.shape()));
      }
      return gather_patches(image, g);
    }
    case OpKind::kSoftmax: {
      const RowView v = rows_of(in(0), id);
      Tensor out(in(0).shape());
      softmax_rows(in(0).data(), out.data(), v);
      return out;
    }
    case OpKind::kLogSoftmax: {
      const RowView v = rows_of(in(0), id);
      Tensor out(in(0).shape());
      log_softmax_rows(in(0).data(), out.data(), v);
      return out;
    }
    case OpKind::kPickPerRow: {
      const RowView v = rows_of(in(0), id);
      if (n.indices.size() != v.rows) throw GraphError(id, "pick_per_row needs one column per row");
      Tensor out({v.rows});
      for (std::size_t r = 0; r < v.rows; ++r) {
        if (n.indices[r] >= v.cols) throw GraphError(id, "pick_per_row column out of range");
        out[r] = in(0)[r * v.cols + n.indices[r]];
      }
      return out;
    }
    case OpKind::kRowSum: {
      const RowView v = rows_of(in(0), id);
      Tensor out({v.rows});
      for (std::size_t r = 0; r < v.rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < v.cols; ++j) s += in(0)[r * v.cols + j];
        out[r] = s;
      }
      return out;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      if (n.kind == OpKind::kMean) s /= static_cast<double>(in(0).numel());
      return Tensor::scalar(s);
    }
    case OpKind::kMaskedMean: {
      const Tensor& a = in(0);
      if (n.mask.size() != a.numel()) throw GraphError(id, "masked_mean mask length does not match operand");
      double s = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) {
        if (n.mask[i]) {
          s += a[i];
          ++count;
        }
      }
      return Tensor::scalar(count ? s / static_cast<double>(count) : 0.0);
    }
  }
  throw GraphError(id, "unknown op");
}

}  // namespace

Values forward(const Graph& graph, const Bindings& bindings) {
  Values values;
  values.reserve(graph.size());
  for (NodeId id = 0; id < graph.size(); ++id) {
    Tensor v = eval_node(graph, id, values, bindings);
    if (!v.all_finite()) throw GraphError(id, "non-finite value from " + std::string(op_name(graph.node(id).kind)));
    values.push_back(std::move(v));
  }
  return values;
}

// ---------------------------------------------------------------------------
// Backward

GradientBundle backward(const Graph& graph, const Values& values, const FaultInjection* fault) {
  if (!graph.loss()) throw InvalidArgument("graph has no designated loss node");
  return backward(graph, values, *graph.loss(), fault);
}

GradientBundle backward(const Graph& graph, const Values& values, NodeId loss, const FaultInjection* fault) {
  if (values.size() != graph.size()) throw InvalidArgument("forward values do not match graph");
  if (loss >= graph.size()) throw InvalidArgument("loss node out of range");
  if (values[loss].numel() != 1) {
    throw GraphError(loss, "loss node must be scalar, has shape " + shape_string(values[loss].shape()));
  }

  std::vector<Tensor> adj(graph.size());
  std::vector<bool> has(graph.size(), false);
  auto grad_of = [&](NodeId id) -> std::span<double> {
    if (!has[id]) {
      adj[id] = Tensor(values[id].shape());
      has[id] = true;
    }
    return adj[id].data();
  };

  adj[loss] = Tensor(values[loss].shape(), 1.0);
  has[loss] = true;

  for (NodeId id = loss + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& n = graph.node(id);
    const double f = (fault && fault->op == n.kind) ? fault->factor : 1.0;
    auto g = adj[id].data();
    auto y = values[id].data();
    auto x = [&](std::size_t i) { return values[n.inputs[i]].data(); };

    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kParameter:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd:
      case OpKind::kSub: {
        const double sb = n.kind == OpKind::kAdd ? f : -f;
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i];
        auto gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sb * g[i];
        break;
      }
      case OpKind::kMul: {
        auto a = x(0);
        auto b = x(1);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] * b[i];
        auto gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += f * g[i] * a[i];
        break;
      }
      case OpKind::kDiv: {
        auto a = x(0);
        auto b = x(1);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] / b[i];
        auto gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= f * g[i] * a[i] / (b[i] * b[i]);
        break;
      }
      case OpKind::kScale: {
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] * n.scalar;
        break;
      }
      case OpKind::kAddScalar: {
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i];
        break;
      }
      case OpKind::kReciprocal: {
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= f * g[i] * y[i] * y[i];
        break;
      }
      case OpKind::kLog: {
        auto a = x(0);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (a[i] > n.scalar) ga[i] += f * g[i] / a[i];
        }
        break;
      }
      case OpKind::kExp: {
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] * y[i];
        break;
      }
      case OpKind::kTanh: {
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case OpKind::kRelu: {
        auto a = x(0);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (a[i] > 0.0) ga[i] += f * g[i];
        }
        break;
      }
      case OpKind::kAffine: {
        const Tensor& xt = values[n.inputs[0]];
        const std::size_t B = xt.dim(0), I = xt.dim(1), O = values[n.inputs[1]].dim(1);
        auto xs = xt.data();
        auto ws = x(1);
        auto gx = grad_of(n.inputs[0]);
        auto gw = grad_of(n.inputs[1]);
        auto gb = grad_of(n.inputs[2]);
        for (std::size_t r = 0; r < B; ++r) {
          const double* gr = g.data() + r * O;
          const double* xr = xs.data() + r * I;
          double* gxr = gx.data() + r * I;
          for (std::size_t o = 0; o < O; ++o) gb[o] += f * gr[o];
          for (std::size_t i = 0; i < I; ++i) {
            const double* wr = ws.data() + i * O;
            double* gwr = gw.data() + i * O;
            const double xv = f * xr[i];
            double acc = 0.0;
            for (std::size_t o = 0; o < O; ++o) {
              acc += gr[o] * wr[o];
              gwr[o] += xv * gr[o];
            }
            gxr[i] += f * acc;
          }
        }
        break;
      }
      case OpKind::kPatchGather: {
        auto gi = grad_of(n.inputs[0]);
        scatter_patches(g, n.patch, gi, f);
        break;
      }
      case OpKind::kSoftmax: {
        const RowView v = rows_of(values[id], id);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < v.rows; ++r) {
          const double* gr = g.data() + r * v.cols;
          const double* yr = y.data() + r * v.cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < v.cols; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < v.cols; ++j) ga[r * v.cols + j] += f * yr[j] * (gr[j] - dot);
        }
        break;
      }
      case OpKind::kLogSoftmax: {
        const RowView v = rows_of(values[id], id);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < v.rows; ++r) {
          const double* gr = g.data() + r * v.cols;
          const double* yr = y.data() + r * v.cols;
          double total = 0.0;
          for (std::size_t j = 0; j < v.cols; ++j) total += gr[j];
          for (std::size_t j = 0; j < v.cols; ++j) ga[r * v.cols + j] += f * (gr[j] - std::exp(yr[j]) * total);
        }
        break;
      }
      case OpKind::kPickPerRow: {
        const RowView v = rows_of(values[n.inputs[0]], id);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < v.rows; ++r) ga[r * v.cols + n.indices[r]] += f * g[r];
        break;
      }
      case OpKind::kRowSum: {
        const RowView v = rows_of(values[n.inputs[0]], id);
        auto ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < v.rows; ++r) {
          for (std::size_t j = 0; j < v.cols; ++j) ga[r * v.cols + j] += f * g[r];
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        auto ga = grad_of(n.inputs[0]);
        const double w = n.kind == OpKind::kMean ? g[0] / static_cast<double>(ga.size()) : g[0];
        for (double& v : ga) v += f * w;
        break;
      }
      case OpKind::kMaskedMean: {
        auto ga = grad_of(n.inputs[0]);
        const auto count = static_cast<std::size_t>(std::count_if(n.mask.begin(), n.mask.end(),
                                                                  [](std::uint8_t m) { return m != 0; }));
        if (count == 0) break;
        const double w = g[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          if (n.mask[i]) ga[i] += f * w;
        }
        break;
      }
    }
  }

  GradientBundle bundle;
  for (NodeId id = 0; id < graph.size(); ++id) {
    const OpKind kind = graph.node(id).kind;
    if (kind != OpKind::kInput && kind != OpKind::kParameter) continue;
    Tensor grad = (id <= loss && has[id]) ? std::move(adj[id]) : Tensor(values[id].shape());
    if (kind == OpKind::kInput) {
      bundle.input_grads.emplace(id, std::move(grad));
    } else {
      bundle.parameter_grads.emplace(id, std::move(grad));
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Finite-difference check

double grad_check(const Graph& graph, const Bindings& bindings, double epsilon, const GradCheckOptions& options) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw InvalidArgument("grad_check epsilon must be in (0, 1e-2]");
  if (!graph.loss()) throw InvalidArgument("graph has no designated loss node");
  const NodeId loss = *graph.loss();

  const Values base = forward(graph, bindings);
  const GradientBundle grads = backward(graph, base, loss, options.fault);

  double worst = 0.0;
  Bindings probe = bindings;
  auto check_node = [&](NodeId id, const Tensor& analytic) {
    Tensor& slot = probe.at(id);
    const std::size_t n = slot.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.max_coords_per_tensor) {
      std::seed_seq seq{options.seed, static_cast<std::uint64_t>(id)};
      std::mt19937_64 rng(seq);
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double original = slot[c];
      slot[c] = original + epsilon;
      const double up = forward(graph, probe)[loss].item();
      slot[c] = original - epsilon;
      const double down = forward(graph, probe)[loss].item();
      slot[c] = original;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[c] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  };

  for (const auto& [id, g] : grads.input_grads) {
    if (probe.count(id)) check_node(id, g);
  }
  for (const auto& [id, g] : grads.parameter_grads) {
    if (probe.count(id)) check_node(id, g);
  }
  return worst;
}

}  // namespace asl::grad
