#include "asl/segmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "asl/binary_io.hpp"

namespace asl::seg {

using grad::Tensor;

std::size_t ModelShape::input_width() const {
  const std::size_t k = 2 * patch_radius + 1;
  return channels * k * k;
}

std::size_t ModelShape::parameter_count() const {
  std::size_t count = 0;
  std::size_t in = input_width();
  for (std::size_t h : hidden) {
    count += in * h + h;
    in = h;
  }
  return count + in * num_classes + num_classes;
}

void validate_shape(const ModelShape& shape) {
  if (shape.channels == 0) throw InvalidArgument("model channels must be positive");
  if (shape.num_classes < 2 || shape.num_classes >= kAnomalyLabel) throw InvalidArgument("model needs at least 2 classes");
  for (std::size_t h : shape.hidden) {
    if (h == 0) throw InvalidArgument("hidden widths must be positive");
  }
}

SegModel::SegModel(ModelShape shape, Tensor params) : shape_(std::move(shape)), params_(std::move(params)) {
  validate_shape(shape_);
  if (params_.rank() != 1 || params_.numel() != shape_.parameter_count()) {
    throw InvalidArgument("parameter tensor has " + std::to_string(params_.numel()) + " entries, model needs " +
                          std::to_string(shape_.parameter_count()));
  }
}

SegModel SegModel::zeros(ModelShape shape) {
  validate_shape(shape);
  const std::size_t n = shape.parameter_count();
  return SegModel(std::move(shape), Tensor({n}));
}

SegModel SegModel::initialize(ModelShape shape, std::uint64_t seed) {
  SegModel model = zeros(std::move(shape));
  std::seed_seq seq{seed, std::uint64_t{0x494e4954}};
  std::mt19937_64 rng(seq);
  Tensor params = model.params_;
  for (const LayerSlice& layer : model.layers()) {
    const double a = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (std::size_t i = 0; i < layer.in * layer.out; ++i) params[layer.weight_offset + i] = dist(rng);
  }
  model.set_params(std::move(params));
  return model;
}

void SegModel::set_params(Tensor params) {
  if (params.shape() != params_.shape()) throw InvalidArgument("parameter shape mismatch");
  if (!params.all_finite()) throw InvalidArgument("parameters must be finite");
  params_ = std::move(params);
}

std::vector<LayerSlice> SegModel::layers() const {
  std::vector<LayerSlice> out;
  std::size_t in = shape_.input_width();
  std::size_t offset = 0;
  auto push = [&](std::size_t width) {
    LayerSlice s{in, width, offset, offset + in * width};
    offset = s.bias_offset + width;
    in = width;
    out.push_back(s);
  };
  for (std::size_t h : shape_.hidden) push(h);
  push(shape_.num_classes);
  return out;
}

SegModel::Wiring SegModel::attach(grad::Graph& graph, grad::NodeId patches) const {
  Wiring wiring;
  grad::NodeId x = patches;
  const auto slices = layers();
  for (std::size_t l = 0; l < slices.size(); ++l) {
    const LayerSlice& s = slices[l];
    const grad::NodeId w = graph.parameter("w" + std::to_string(l), {s.in, s.out});
    const grad::NodeId b = graph.parameter("b" + std::to_string(l), {s.out});
    wiring.weights.push_back(w);
    wiring.biases.push_back(b);
    x = graph.affine(x, w, b);
    if (l + 1 < slices.size()) x = graph.tanh(x);
  }
  wiring.logits = x;
  return wiring;
}

void SegModel::bind(grad::Bindings& bindings, const Wiring& wiring) const {
  const auto slices = layers();
  auto p = params_.data();
  for (std::size_t l = 0; l < slices.size(); ++l) {
    const LayerSlice& s = slices[l];
    const auto w0 = p.begin() + static_cast<std::ptrdiff_t>(s.weight_offset);
    const auto b0 = p.begin() + static_cast<std::ptrdiff_t>(s.bias_offset);
    bindings.insert_or_assign(wiring.weights[l],
                              Tensor({s.in, s.out}, std::vector<double>(w0, w0 + static_cast<std::ptrdiff_t>(s.in * s.out))));
    bindings.insert_or_assign(wiring.biases[l], Tensor({s.out}, std::vector<double>(b0, b0 + static_cast<std::ptrdiff_t>(s.out))));
  }
}

Tensor SegModel::flatten_gradient(const grad::GradientBundle& grads, const Wiring& wiring) const {
  Tensor flat(params_.shape());
  const auto slices = layers();
  for (std::size_t l = 0; l < slices.size(); ++l) {
    const LayerSlice& s = slices[l];
    const Tensor& gw = grads.parameter_grads.at(wiring.weights[l]);
    const Tensor& gb = grads.parameter_grads.at(wiring.biases[l]);
    std::copy(gw.data().begin(), gw.data().end(), flat.data().begin() + static_cast<std::ptrdiff_t>(s.weight_offset));
    std::copy(gb.data().begin(), gb.data().end(), flat.data().begin() + static_cast<std::ptrdiff_t>(s.bias_offset));
  }
  return flat;
}

Tensor extract_patches(const Tensor& image, std::size_t radius, std::span<const std::size_t> pixels) {
  if (image.rank() != 3) throw InvalidArgument("image must be C×H×W");
  if (pixels.empty()) throw InvalidArgument("no pixels to extract");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const std::size_t k = 2 * radius + 1;
  const std::size_t width = C * k * k;
  const auto r = static_cast<long>(radius);
  Tensor out({pixels.size(), width});
  auto src = image.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] >= H * W) throw InvalidArgument("pixel index outside image");
    const long h0 = static_cast<long>(pixels[i] / W);
    const long w0 = static_cast<long>(pixels[i] % W);
    double* row = dst.data() + i * width;
    for (std::size_t c = 0; c < C; ++c) {
      for (long dy = -r; dy <= r; ++dy) {
        const long h = std::clamp(h0 + dy, 0L, static_cast<long>(H) - 1);
        for (long dx = -r; dx <= r; ++dx) {
          const long w = std::clamp(w0 + dx, 0L, static_cast<long>(W) - 1);
          *row++ = src[c * H * W + static_cast<std::size_t>(h) * W + static_cast<std::size_t>(w)];
        }
      }
    }
  }
  return out;
}

Tensor predict_rows(const SegModel& model, const Tensor& patches) {
  if (patches.rank() != 2 || patches.dim(1) != model.shape().input_width()) {
    throw InvalidArgument("patch rows have width " + grad::shape_string(patches.shape()) + ", model expects " +
                          std::to_string(model.shape().input_width()));
  }
  grad::Graph graph;
  const grad::NodeId x = graph.input("patches", patches.shape());
  const auto wiring = model.attach(graph, x);
  grad::Bindings bindings;
  bindings.emplace(x, patches);
  model.bind(bindings, wiring);
  return std::move(grad::forward(graph, bindings)[wiring.logits]);
}

Tensor predict_logits(const SegModel& model, const Tensor& image) {
  if (image.rank() != 3) throw InvalidArgument("image must be C×H×W");
  if (image.dim(0) != model.shape().channels) {
    throw InvalidArgument("image has " + std::to_string(image.dim(0)) + " channels, model expects " +
                          std::to_string(model.shape().channels));
  }
  const std::size_t H = image.dim(1), W = image.dim(2), N = model.num_classes();
  std::vector<std::size_t> pixels(H * W);
  std::iota(pixels.begin(), pixels.end(), 0);
  const Tensor rows = predict_rows(model, extract_patches(image, model.shape().patch_radius, pixels));
  Tensor out({N, H, W});
  for (std::size_t p = 0; p < H * W; ++p) {
    for (std::size_t c = 0; c < N; ++c) out[c * H * W + p] = rows[p * N + c];
  }
  return out;
}

Tensor softmax_map(const Tensor& logits) {
  if (logits.rank() != 3) throw InvalidArgument("logit map must be N×H×W");
  const std::size_t N = logits.dim(0), P = logits.dim(1) * logits.dim(2);
  Tensor out(logits.shape());
  std::vector<double> e(N);
  for (std::size_t p = 0; p < P; ++p) {
    double m = logits[p];
    for (std::size_t c = 1; c < N; ++c) m = std::max(m, logits[c * P + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < N; ++c) {
      e[c] = std::exp(logits[c * P + p] - m);
      z += e[c];
    }
    for (std::size_t c = 0; c < N; ++c) out[c * P + p] = e[c] / z;
  }
  return out;
}

std::vector<double> ScoreMap::anomaly_scores() const {
  std::vector<double> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [](double m) { return 1.0 - m; });
  return out;
}

ScoreMap msp_score(const Tensor& softmax) {
  if (softmax.rank() != 3) throw InvalidArgument("softmax map must be N×H×W");
  const std::size_t N = softmax.dim(0), P = softmax.dim(1) * softmax.dim(2);
  ScoreMap map{softmax.dim(1), softmax.dim(2), std::vector<double>(P)};
  for (std::size_t p = 0; p < P; ++p) {
    double m = softmax[p];
    for (std::size_t c = 1; c < N; ++c) m = std::max(m, softmax[c * P + p]);
    map.values[p] = m;
  }
  return map;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

std::vector<std::int32_t> classify_with_threshold(const Tensor& softmax, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("threshold must be in [0, 1]");
  if (softmax.rank() != 3) throw InvalidArgument("softmax map must be N×H×W");
  const std::size_t N = softmax.dim(0), P = softmax.dim(1) * softmax.dim(2);
  std::vector<std::int32_t> out(P);
  std::vector<double> row(N);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t c = 0; c < N; ++c) row[c] = softmax[c * P + p];
    const std::size_t best = argmax(row);
    out[p] = row[best] <= delta ? kAnomalyDecision : static_cast<std::int32_t>(best);
  }
  return out;
}

// --- checkpoint ---------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const SegModel& model) {
  const ModelShape& s = model.shape();
  io::ByteWriter w;
  w.bytes("ASLM");
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(s.channels));
  w.u32(static_cast<std::uint32_t>(s.num_classes));
  w.u32(static_cast<std::uint32_t>(s.patch_radius));
  w.u32(static_cast<std::uint32_t>(s.hidden.size()));
  for (std::size_t h : s.hidden) w.u32(static_cast<std::uint32_t>(h));
  for (double v : model.params().data()) w.f64(v);
  return std::move(w.buffer());
}

SegModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, "checkpoint");
  r.expect_magic("ASLM");
  const std::size_t version_at = r.offset();
  if (const std::uint8_t v = r.u8("version"); v != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(v), version_at);
  }
  const std::size_t header_at = r.offset();
  ModelShape shape;
  shape.channels = r.u32("channels");
  shape.num_classes = r.u32("num_classes");
  shape.patch_radius = r.u32("patch_radius");
  const std::uint32_t layers = r.u32("layer count");
  r.need_items(layers, 4, "layer widths");
  shape.hidden.resize(layers);
  for (auto& h : shape.hidden) h = r.u32("layer width");
  if (shape.patch_radius > 64) r.fail("patch radius too large", header_at + 8);
  if (shape.channels > (1u << 16) || shape.num_classes > (1u << 16)) r.fail("shape overflow", header_at);
  for (std::size_t h : shape.hidden) {
    if (h > (1u << 20)) r.fail("layer width too large", header_at + 16);
  }
  try {
    validate_shape(shape);
  } catch (const InvalidArgument& e) {
    r.fail(e.what(), header_at);
  }
  const std::size_t count = shape.parameter_count();
  r.need_items(count, 8, "parameters");
  std::vector<double> params(count);
  for (double& v : params) v = r.f64("parameters");
  r.expect_end();
  try {
    return SegModel(std::move(shape), Tensor({count}, std::move(params)));
  } catch (const InvalidArgument& e) {
    r.fail(e.what(), bytes.size());
  }
}

void save_checkpoint(const std::filesystem::path& path, const SegModel& model) {
  io::write_file(path, encode_checkpoint(model));
}

SegModel load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace asl::seg
