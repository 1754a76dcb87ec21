#include <algorithm>
#include <array>
#include <functional>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "asl/error.hpp"
#include "asl/scenes.hpp"

namespace asl::scenes {

SubsetPartition partition_classes(std::size_t num_classes, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("partition needs k >= 2");
  if (k > num_classes) {
    throw InvalidArgument("cannot split " + std::to_string(num_classes) + " classes into " + std::to_string(k) +
                          " non-empty subsets");
  }
  std::vector<std::uint16_t> order(num_classes);
  std::iota(order.begin(), order.end(), std::uint16_t{0});
  std::seed_seq seq{seed};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);

  SubsetPartition out(k);
  for (std::size_t i = 0; i < order.size(); ++i) out[i % k].push_back(order[i]);
  for (auto& subset : out) std::sort(subset.begin(), subset.end());
  return out;
}

void validate_partition(const SubsetPartition& partition, std::size_t num_classes) {
  std::vector<int> seen(num_classes, 0);
  for (const auto& subset : partition) {
    if (subset.empty()) throw InvalidArgument("partition contains an empty subset");
    for (std::uint16_t c : subset) {
      if (c >= num_classes) throw InvalidArgument("partition class " + std::to_string(c) + " out of range");
      if (seen[c]++) throw InvalidArgument("partition class " + std::to_string(c) + " appears twice");
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!seen[c]) throw InvalidArgument("partition does not cover class " + std::to_string(c));
  }
}

SubsetPartition icosahedral_partition(const FeatureLayout& layout) {
  const auto& m = layout.class_means;
  if (m.size() != 12 || m[0].size() != 3) throw InvalidArgument("icosahedral partition needs 12 means in 3-D");
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t d = 0; d < 3; ++d) s += (m[i][d] - m[j][d]) * (m[i][d] - m[j][d]);
    return std::sqrt(s);
  };
  double edge = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = i + 1; j < 12; ++j) edge = std::min(edge, dist(i, j));
  }
  auto adjacent = [&](std::size_t i, std::size_t j) { return std::abs(dist(i, j) - edge) < 1e-6 * edge; };

  using Face = std::array<std::uint16_t, 3>;
  std::vector<Face> faces;
  for (std::uint16_t i = 0; i < 12; ++i) {
    for (std::uint16_t j = i + 1; j < 12; ++j) {
      for (std::uint16_t k = j + 1; k < 12; ++k) {
        if (adjacent(i, j) && adjacent(j, k) && adjacent(i, k)) faces.push_back({i, j, k});
      }
    }
  }
  auto centroid = [&](const Face& f) {
    std::array<double, 3> c{};
    for (std::uint16_t v : f) {
      for (std::size_t d = 0; d < 3; ++d) c[d] += m[v][d] / 3.0;
    }
    return c;
  };
  auto cosine = [&](const Face& a, const Face& b) {
    const auto ca = centroid(a);
    const auto cb = centroid(b);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      dot += ca[d] * cb[d];
      na += ca[d] * ca[d];
      nb += cb[d] * cb[d];
    }
    return dot / std::sqrt(na * nb);
  };

  // Depth-first search for four faces with pairwise centroid cosine -1/3 that cover all vertices.
  std::vector<std::size_t> chosen;
  std::function<bool(std::size_t, std::uint32_t)> search = [&](std::size_t from, std::uint32_t used) -> bool {
    if (chosen.size() == 4) return used == 0xFFF;
    for (std::size_t f = from; f < faces.size(); ++f) {
      std::uint32_t bits = 0;
      for (std::uint16_t v : faces[f]) bits |= 1u << v;
      if (bits & used) continue;
      bool regular = true;
      for (std::size_t g : chosen) regular = regular && std::abs(cosine(faces[f], faces[g]) + 1.0 / 3.0) < 1e-6;
      if (!regular) continue;
      chosen.push_back(f);
      if (search(f + 1, used | bits)) return true;
      chosen.pop_back();
    }
    return false;
  };
  if (!search(0, 0)) throw InvalidArgument("layout has no tetrahedral face partition");

  SubsetPartition out;
  for (std::size_t f : chosen) out.emplace_back(faces[f].begin(), faces[f].end());
  return out;
}

Relabeled relabel_as_known_unknown(const std::vector<Scene>& scenes, const std::vector<std::uint16_t>& anomaly_subset) {
  Relabeled out;
  if (scenes.empty()) {
    out.scenes = scenes;
    return out;
  }
  const std::uint32_t n = scenes.front().num_classes;
  std::set<std::uint16_t> subset(anomaly_subset.begin(), anomaly_subset.end());
  for (std::uint16_t c : subset) {
    if (c >= n) throw InvalidArgument("anomaly subset class " + std::to_string(c) + " out of range");
  }
  if (subset.size() == n) throw InvalidArgument("anomaly subset covers every class; no known classes remain");

  out.forward.assign(n, std::nullopt);
  for (std::uint16_t c = 0; c < n; ++c) {
    if (subset.count(c)) continue;
    out.forward[c] = static_cast<std::uint16_t>(out.inverse.size());
    out.inverse.push_back(c);
  }

  out.scenes.reserve(scenes.size());
  for (const Scene& s : scenes) {
    if (s.num_classes != n) throw InvalidArgument("scenes disagree on the number of classes");
    Scene r = s;
    r.num_classes = static_cast<std::uint32_t>(out.inverse.size());
    for (std::size_t p = 0; p < r.labels.size(); ++p) {
      const std::uint16_t label = r.labels[p];
      if (label == kAnomalyLabel) continue;
      if (out.forward[label]) {
        r.labels[p] = *out.forward[label];
      } else {
        r.labels[p] = kAnomalyLabel;
        r.roles[p] = PixelRole::kUnknown;
      }
    }
    out.scenes.push_back(std::move(r));
  }
  return out;
}

}  // namespace asl::scenes
