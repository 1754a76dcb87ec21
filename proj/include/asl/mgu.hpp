#pragma once

// Masked Gradient Update: push the pixels of one adversarial class out of
// that class's decision region by masked descent on the input features.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asl/error.hpp"
#include "asl/scene.hpp"
#include "asl/segmodel.hpp"

namespace asl::mgu {

enum class ReinclusionPolicy {
  /// A pixel that leaves the update set is never updated again.
  kPermanentRemoval,
};

struct MguConfig {
  double step_size = 100.0;
  std::size_t max_iters = 200;
  double clip_lo = -4.0;
  double clip_hi = 4.0;
  std::size_t per_class_budget = 10;
  ReinclusionPolicy reinclusion = ReinclusionPolicy::kPermanentRemoval;
  std::uint64_t seed = 1;
};

void validate_config(const MguConfig& config);

/// Sorted, duplicate-free (h, w) pixel indices inside an H×W grid.
class PixelIndexSet {
 public:
  PixelIndexSet() = default;
  PixelIndexSet(std::size_t height, std::size_t width, std::vector<std::pair<std::size_t, std::size_t>> pixels);

  static PixelIndexSet from_flat(std::size_t height, std::size_t width, std::vector<std::size_t> flat);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return flat_.size(); }
  bool empty() const noexcept { return flat_.empty(); }
  /// Flat h*W+w indices in ascending order.
  const std::vector<std::size_t>& flat() const noexcept { return flat_; }
  std::vector<std::pair<std::size_t, std::size_t>> pairs() const;
  bool contains(std::size_t flat_index) const;

  friend bool operator==(const PixelIndexSet&, const PixelIndexSet&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::size_t> flat_;
};

enum class Termination {
  /// No pixel of the target region is still predicted as the adversarial class.
  kEmptySet,
  kIterCap,
  /// The update set emptied, but pixels removed earlier drifted back to the
  /// adversarial class through their neighbours and may not be updated again.
  kReentryBlocked,
  /// The scene has no pixel of the adversarial class.
  kNoTarget,
  kNonFinite,
};

std::string_view termination_name(Termination t);

struct MguTrace {
  std::size_t iterations = 0;
  /// |P| and loss before each update step.
  std::vector<std::size_t> active_count;
  std::vector<double> loss;
  Termination termination = Termination::kNoTarget;
};

class MguError : public Error {
 public:
  MguError(const std::string& what, MguTrace trace) : Error(what), trace_(std::move(trace)) {}
  const MguTrace& trace() const noexcept { return trace_; }

 private:
  MguTrace trace_;
};

/// Mean adversarial-class softmax probability over `active`.
double mgu_loss(const seg::SegModel& model, const grad::Tensor& image, const PixelIndexSet& active,
                std::size_t y_adv);

/// Loss and its gradient with respect to the whole image.
struct LossGradient {
  double value = 0.0;
  grad::Tensor image_grad;
};
LossGradient mgu_loss_gradient(const seg::SegModel& model, const grad::Tensor& image, const PixelIndexSet& active,
                               std::size_t y_adv);

struct MguResult {
  Scene scene;
  MguTrace trace;
  /// True when the scene had no pixel of the adversarial class.
  bool empty_target = false;
};

MguResult masked_gradient_update(const seg::SegModel& model, const Scene& scene, std::size_t y_adv,
                                 const MguConfig& config);

struct AuxiliaryScene {
  Scene scene;
  std::uint16_t adversarial_class = 0;
  std::size_t source_index = 0;
  bool empty_target = false;
  MguTrace trace;
};

struct AuxiliarySet {
  std::vector<AuxiliaryScene> scenes;
  std::vector<std::string> warnings;
};

/// Source scene indices chosen for every class, in class order. Classes absent
/// from the corpus get an empty list.
std::vector<std::vector<std::size_t>> select_sources(const std::vector<Scene>& scenes, std::size_t num_classes,
                                                     const MguConfig& config);

AuxiliarySet build_auxiliary_set(const seg::SegModel& model, const std::vector<Scene>& train_scenes,
                                 const MguConfig& config);

/// Header "iteration,active_count,loss".
std::string trace_csv(const MguTrace& trace);

}  // namespace asl::mgu
