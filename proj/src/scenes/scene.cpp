#include "asl/scene.hpp"

#include <algorithm>

#include "asl/error.hpp"

namespace asl {

std::size_t Scene::count_role(PixelRole role) const {
  return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), role));
}

bool Scene::contains_class(std::uint16_t label) const {
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

void validate_scene(const Scene& scene) {
  if (scene.features.rank() != 3) throw InvalidArgument("scene features must be C×H×W");
  const std::size_t n = scene.pixel_count();
  if (scene.labels.size() != n || scene.roles.size() != n) {
    throw InvalidArgument("scene label/role maps do not match the image size");
  }
  if (scene.num_classes == 0 || scene.num_classes >= kAnomalyLabel) {
    throw InvalidArgument("scene num_classes out of range");
  }
  for (std::size_t p = 0; p < n; ++p) {
    const bool anomalous = scene.labels[p] == kAnomalyLabel;
    const PixelRole role = scene.roles[p];
    if (role != PixelRole::kKnown && role != PixelRole::kUnknown && role != PixelRole::kSynthUnknown) {
      throw InvalidArgument("scene pixel " + std::to_string(p) + " has an invalid role");
    }
    if (anomalous != (role != PixelRole::kKnown)) {
      throw InvalidArgument("scene pixel " + std::to_string(p) + " label/role disagree");
    }
    if (!anomalous && scene.labels[p] >= scene.num_classes) {
      throw InvalidArgument("scene pixel " + std::to_string(p) + " label out of range");
    }
  }
}

}  // namespace asl
