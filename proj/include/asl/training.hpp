#pragma once

// Mini-batch SGD over pooled scene pixels, shared by supervised pre-training
// and anomaly-aware fine-tuning.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "asl/error.hpp"
#include "asl/segmodel.hpp"

namespace asl::seg {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct PixelRef {
  std::uint32_t scene = 0;
  std::uint32_t pixel = 0;
};

/// A batch of pixels: their patch rows, class labels (valid where !outlier) and
/// whether each pixel is an outlier-exposure target.
struct PixelBatch {
  grad::Tensor patches;
  std::vector<std::size_t> labels;
  std::vector<std::uint8_t> outlier;

  std::size_t size() const { return labels.size(); }
};

/// Which roles enter training, and as what.
struct PixelSelection {
  bool known = true;
  bool synth_unknown_as_outlier = false;
  bool unknown_as_outlier = false;
};

std::vector<PixelRef> collect_pixels(std::span<const Scene* const> scenes, const PixelSelection& selection);

PixelBatch make_batch(std::span<const Scene* const> scenes, std::span<const PixelRef> refs, std::size_t radius);

struct Objective {
  double value = 0.0;
  grad::Tensor gradient;  // flat, same layout as SegModel::params()
};

using ObjectiveFn = std::function<Objective(const SegModel&, const PixelBatch&)>;

/// Appends the mean cross-entropy over the batch's non-outlier rows of `logits`;
/// 0 when every row is an outlier.
grad::NodeId cross_entropy_term(grad::Graph& graph, grad::NodeId logits, const PixelBatch& batch);

/// Mean cross-entropy over the batch's non-outlier pixels.
Objective cross_entropy_objective(const SegModel& model, const PixelBatch& batch);

struct SgdOptions {
  std::size_t epochs = 20;
  double lr = 0.1;
  /// Pixels per step; 0 means the whole pool in one step.
  std::size_t batch = 256;
  std::uint64_t seed = 1;
  /// Reshuffle the pool each epoch; when false batches follow pool order.
  bool shuffle = true;
};

void validate_sgd(const SgdOptions& options);

using EpochHook = std::function<void(std::size_t epoch, const SegModel& model)>;

/// Per-epoch mean of the batch objective values. `after_epoch` runs after every epoch.
std::vector<double> run_sgd(SegModel& model, std::span<const Scene* const> scenes, std::span<const PixelRef> pool,
                            const SgdOptions& options, const ObjectiveFn& objective,
                            const EpochHook& after_epoch = {});

/// Single parameter update: params -= lr * objective gradient. Returns the objective value.
double sgd_step(SegModel& model, const PixelBatch& batch, double lr, const ObjectiveFn& objective);

/// Mean cross-entropy over all listed pixels with the current parameters.
double mean_cross_entropy(const SegModel& model, std::span<const Scene* const> scenes, std::span<const PixelRef> pool);

struct TrainResult {
  SegModel model;
  std::vector<double> epoch_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Supervised pre-training with cross-entropy over every pixel. Rejects scenes
/// containing anomaly labels. Throws TrainingError if the corpus loss does not
/// strictly decrease over a non-empty run.
TrainResult train_supervised(SegModel model, std::span<const Scene> scenes, const SgdOptions& options);

}  // namespace asl::seg
