#pragma once

// Anomaly metrics over pooled pixel scores (unknown = positive), threshold
// sweeps, and the known-unknown selection-bias pilot.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asl/aaft.hpp"
#include "asl/scene.hpp"
#include "asl/scenes.hpp"
#include "asl/segmodel.hpp"

namespace asl::eval {

/// Anomaly scores (higher = more anomalous) with parallel truth flags (1 = unknown).
struct ScoredPixels {
  std::vector<double> scores;
  std::vector<std::uint8_t> truth;

  std::size_t positives() const;
  std::size_t negatives() const;
};

/// Pairwise probability that a positive outscores a negative, ties counting one half.
double auroc(const ScoredPixels& sp);
/// Average precision; equal scores form a single threshold.
double aupr(const ScoredPixels& sp);
/// FPR at the largest threshold whose TPR reaches `target_tpr` (score >= threshold is positive).
double fpr_at_tpr(const ScoredPixels& sp, double target_tpr = 0.95);

struct MetricReport {
  double aupr = 0.0;
  double auroc = 0.0;
  double fpr95 = 0.0;
  double aupr_random_guess = 0.0;
};

MetricReport compute_metrics(const ScoredPixels& sp, double target_tpr = 0.95);

/// Truth for one pixel: 1 positive, 0 negative, nullopt to leave it out.
using TruthFn = std::function<std::optional<std::uint8_t>(const Scene& scene, std::size_t pixel)>;

/// 1 - MSP for every pixel the truth function keeps, pooled in scene order.
ScoredPixels score_pixels(const seg::SegModel& model, const std::vector<Scene>& scenes, const TruthFn& truth);

/// Pools every pixel; UNKNOWN pixels are positives, KNOWN ones negatives.
/// Rejects a split without UNKNOWN pixels.
MetricReport evaluate_anomaly(const seg::SegModel& model, const std::vector<Scene>& test_scenes,
                              double target_tpr = 0.95);

/// Header "metric,value", rows aupr, auroc, fpr95, aupr_random_guess.
std::string metrics_csv(const MetricReport& report);

struct SweepPoint {
  double delta = 0.0;
  double semantic_acc = 0.0;
  double anomaly_acc = 0.0;
};
using SweepCurve = std::vector<SweepPoint>;

/// Rejects an empty grid or one that is not strictly increasing inside [0, 1].
void validate_deltas(std::span<const double> deltas);
/// `count` evenly spaced values from 0 to 1 inclusive.
std::vector<double> uniform_deltas(std::size_t count);

SweepCurve threshold_sweep(const seg::SegModel& model, const std::vector<Scene>& test_scenes,
                           std::span<const double> deltas);

/// Header "delta,semantic_acc,anomaly_acc".
std::string curves_csv(const SweepCurve& curve);

// --- Selection-bias pilot ----------------------------------------------------

struct PilotConfig {
  seg::ModelShape model;  // num_classes is taken from the corpus
  seg::SgdOptions train;
  aaft::LossConfig loss{0.05, aaft::UnknownLoss::kKL, std::nullopt};
  double target_tpr = 0.95;
  std::uint64_t seed = 1;
};

struct PilotRow {
  std::vector<std::uint16_t> subset;
  /// Test pixels of the subset classes as positives, known pixels as negatives.
  MetricReport subset_metrics;
  /// Held-out anomaly regions as positives, known pixels as negatives.
  MetricReport anomaly_metrics;
  bool failed = false;
  std::string error;
};

struct PilotTable {
  std::vector<PilotRow> rows;
  /// Means and max - min over the rows that did not fail.
  MetricReport subset_average;
  MetricReport subset_spread;
  MetricReport anomaly_average;
  MetricReport anomaly_spread;
};

/// For each subset: relabel it as known-unknown, train a fresh model with the
/// known-unknown objective, and evaluate. A failing subset is marked, not fatal.
PilotTable pilot_study(const scenes::Corpus& corpus, const scenes::SubsetPartition& partition,
                       const PilotConfig& config);

/// Header "subset,aupr,auroc,fpr95,aupr_random_guess"; one row per subset,
/// then sub_average and spread. `anomaly` selects the held-out anomaly view.
std::string pilot_csv(const PilotTable& table, bool anomaly = false);

}  // namespace asl::eval
