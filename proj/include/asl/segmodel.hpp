#pragma once

// Per-pixel patch classifier: a tanh MLP applied to the (2r+1)×(2r+1) window
// around every pixel, plus the softmax / MSP / threshold read-outs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "asl/graph.hpp"
#include "asl/scene.hpp"

namespace asl::seg {

struct ModelShape {
  std::size_t channels = 3;
  std::size_t num_classes = 12;
  std::size_t patch_radius = 1;
  std::vector<std::size_t> hidden{32, 32};

  std::size_t input_width() const;
  std::size_t parameter_count() const;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

void validate_shape(const ModelShape& shape);

/// Location of one affine layer inside the flat parameter vector:
/// weights [in][out] row-major at weight_offset, then bias [out].
struct LayerSlice {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

class SegModel {
 public:
  SegModel(ModelShape shape, grad::Tensor params);

  static SegModel zeros(ModelShape shape);
  /// Xavier-uniform weights, zero biases.
  static SegModel initialize(ModelShape shape, std::uint64_t seed);

  const ModelShape& shape() const noexcept { return shape_; }
  std::size_t num_classes() const noexcept { return shape_.num_classes; }
  const grad::Tensor& params() const noexcept { return params_; }
  void set_params(grad::Tensor params);
  std::vector<LayerSlice> layers() const;

  /// Parameter and logits nodes added to a graph by attach().
  struct Wiring {
    std::vector<grad::NodeId> weights;
    std::vector<grad::NodeId> biases;
    grad::NodeId logits = 0;
  };

  /// Adds the network on top of `patches` ([B, input_width]) and returns its nodes.
  Wiring attach(grad::Graph& graph, grad::NodeId patches) const;
  void bind(grad::Bindings& bindings, const Wiring& wiring) const;
  /// Packs per-layer parameter gradients back into the flat layout.
  grad::Tensor flatten_gradient(const grad::GradientBundle& grads, const Wiring& wiring) const;

  friend bool operator==(const SegModel&, const SegModel&) = default;

 private:
  ModelShape shape_;
  grad::Tensor params_;
};

/// Rows of (channel, dy, dx) windows around `pixels`, edge-replicated. Shape [P, C·(2r+1)²].
grad::Tensor extract_patches(const grad::Tensor& image, std::size_t radius, std::span<const std::size_t> pixels);

/// Logits for a [B, input_width] patch matrix. Shape [B, N].
grad::Tensor predict_rows(const SegModel& model, const grad::Tensor& patches);

/// Logit map N×H×W for a C×H×W image.
grad::Tensor predict_logits(const SegModel& model, const grad::Tensor& image);

/// Per-pixel softmax over the class axis of an N×H×W logit map.
grad::Tensor softmax_map(const grad::Tensor& logits);

/// Per-pixel maximum softmax probability, row-major H×W.
struct ScoreMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  /// 1 - MSP: higher means more anomalous.
  std::vector<double> anomaly_scores() const;
};

ScoreMap msp_score(const grad::Tensor& softmax);

/// Class index per pixel, or kAnomalyDecision where max softmax <= delta.
inline constexpr std::int32_t kAnomalyDecision = -1;
std::vector<std::int32_t> classify_with_threshold(const grad::Tensor& softmax, double delta);

/// Argmax with ties broken towards the lowest index.
std::size_t argmax(std::span<const double> row);

// --- Checkpoint file ----------------------------------------------------------
//
// "ASLM", version byte (1), u32 LE C, N, patch_radius, hidden layer count,
// each hidden width; then every parameter as f64 LE. Parameters are stored
// layer by layer (hidden layers in order, then the output layer), each as its
// weight matrix [in][out] row-major followed by its bias [out]. The input
// feature order of the first layer is (channel, dy, dx).

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const SegModel& model);
SegModel decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const SegModel& model);
SegModel load_checkpoint(const std::filesystem::path& path);

}  // namespace asl::seg
