#pragma once

// Anomaly-aware fine-tuning: unknown-pixel losses that pull the softmax
// towards uniform, and the mixed known / synthetic-unknown training loop.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asl/graph.hpp"
#include "asl/training.hpp"

namespace asl::aaft {

inline constexpr double kProbabilityFloor = 1e-12;

enum class UnknownLoss { kKL, kER };

std::string_view loss_name(UnknownLoss loss);
/// "KL" or "ER" (case-insensitive).
UnknownLoss parse_loss(std::string_view text);

struct LossConfig {
  double alpha = 0.05;
  UnknownLoss unknown_loss = UnknownLoss::kER;
  /// Entropy-ratio regularizer; unset means default_regularizer(N).
  std::optional<double> r;
};

void validate_config(const LossConfig& config);

/// 0.01 · log N, the uniform entropy scaled down.
double default_regularizer(std::size_t num_classes);
double resolved_regularizer(const LossConfig& config, std::size_t num_classes);

/// -Σ z·log(S_i / z) with z = 1/N. Entries below the floor are raised to it.
double kl_uniform_loss(std::span<const double> softmax_row);
/// (H_u + r) / (H(S) + r) - 1.
double entropy_ratio_loss(std::span<const double> softmax_row, double r);
double shannon_entropy(std::span<const double> softmax_row);

/// Appends the per-row unknown loss for a [B, N] probability node; returns a [B] node.
grad::NodeId unknown_loss_rows(grad::Graph& graph, grad::NodeId probs, std::size_t num_classes, UnknownLoss loss,
                               double r);

/// Mean cross-entropy over known pixels of the batch plus alpha times the mean
/// unknown loss over outlier pixels. Either term is 0 when it has no pixels.
seg::Objective combined_objective(const seg::SegModel& model, const seg::PixelBatch& batch, const LossConfig& config);

/// Separate term values for a batch, without gradients.
struct TermValues {
  double known = 0.0;
  double unknown = 0.0;
  std::size_t known_count = 0;
  std::size_t unknown_count = 0;
};
TermValues evaluate_terms(const seg::SegModel& model, std::span<const Scene* const> scenes,
                          std::span<const seg::PixelRef> pool, const LossConfig& config);

struct FinetuneReport {
  /// Values before the first update.
  double initial_known_loss = 0.0;
  double initial_unknown_loss = 0.0;
  /// Full-pool values after each epoch.
  std::vector<double> mean_known_loss;
  std::vector<double> mean_unknown_loss;
  std::size_t epochs = 0;
};

/// Header "epoch,mean_Lk,mean_unknown_loss"; epoch 0 is the state before training.
std::string report_csv(const FinetuneReport& report);

struct FinetuneResult {
  seg::SegModel model;
  FinetuneReport report;
};

/// Runs SGD on the combined objective over every pixel `selection` admits.
/// Does not check for progress.
FinetuneResult train_combined(seg::SegModel model, std::span<const Scene* const> scenes,
                              const seg::PixelSelection& selection, const LossConfig& config,
                              const seg::SgdOptions& options);

/// Fine-tunes on train ∪ auxiliary scenes: known pixels under cross-entropy,
/// synthetic-unknown pixels under the unknown loss. Rejects an empty auxiliary
/// set; throws TrainingError if the mean unknown loss does not end strictly
/// below its starting value.
FinetuneResult finetune(seg::SegModel model, std::span<const Scene> train_scenes,
                        std::span<const Scene> auxiliary_scenes, const LossConfig& config,
                        const seg::SgdOptions& options);

}  // namespace asl::aaft
