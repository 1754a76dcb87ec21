#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "asl/tensor.hpp"

namespace asl {

/// Label carried by pixels that belong to no known class.
inline constexpr std::uint16_t kAnomalyLabel = 65535;

enum class PixelRole : std::uint8_t {
  kKnown = 0,
  kUnknown = 1,
  kSynthUnknown = 2,
};

/// A C×H×W feature image with per-pixel labels and roles.
///
/// labels[p] == kAnomalyLabel exactly where roles[p] != kKnown; every other
/// label is below num_classes.
struct Scene {
  grad::Tensor features;
  std::vector<std::uint16_t> labels;
  std::vector<PixelRole> roles;
  std::uint32_t num_classes = 0;

  std::size_t channels() const { return features.dim(0); }
  std::size_t height() const { return features.dim(1); }
  std::size_t width() const { return features.dim(2); }
  std::size_t pixel_count() const { return height() * width(); }

  /// Feature of channel c at flat pixel p.
  double feature(std::size_t c, std::size_t p) const { return features[c * pixel_count() + p]; }

  std::size_t count_role(PixelRole role) const;
  bool contains_class(std::uint16_t label) const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Throws InvalidArgument if the scene breaks its invariants.
void validate_scene(const Scene& scene);

}  // namespace asl
