#pragma once

// Procedural corpus generation, class-subset partitioning, and the scene /
// manifest file formats.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "asl/error.hpp"
#include "asl/scene.hpp"

namespace asl::scenes {

/// How class means and anomaly components are placed in feature space.
enum class Layout {
  /// Seeded rejection sampling inside a box; classes differ in spacing and frequency.
  kRandom,
  /// Class means on the 12 vertices of a regular icosahedron (N=12, C=3),
  /// anomaly components on its 20 face centroids. Every class is
  /// interchangeable with every other under the rotation group.
  kIcosahedral,
};

struct CorpusConfig {
  std::size_t num_classes = 12;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  Layout layout = Layout::kRandom;

  /// Per-channel Gaussian noise on every pixel feature.
  double noise_sigma = 0.1;
  /// Class means (and anomaly centres versus class means) are at least this many sigma apart.
  double min_separation_sigmas = 5.0;
  /// Random layout: means drawn inside [-box, box]^C. Icosahedral: edge length.
  double mean_scale = 1.5;
  /// Random layout only: class frequency weights decay geometrically by this ratio.
  double frequency_skew = 0.85;
  /// Random layout only: per-class noise scales run geometrically from
  /// noise_sigma to noise_spread * noise_sigma in shuffled class order. 1 keeps them equal.
  double noise_spread = 1.0;
  double feature_lo = -4.0;
  double feature_hi = 4.0;

  std::size_t shapes_min = 2;
  std::size_t shapes_max = 6;
  std::size_t shape_size_min = 5;
  std::size_t shape_size_max = 14;

  std::size_t train_scenes = 200;
  std::size_t val_scenes = 20;
  std::size_t test_scenes = 50;

  std::size_t anomaly_components = 4;
  std::size_t anomaly_shapes_per_scene = 1;
  std::size_t anomaly_size_min = 4;
  std::size_t anomaly_size_max = 6;
  double anomaly_sigma = 0.1;

  std::uint64_t seed = 1;
};

/// Class means and anomaly component centres derived from a config.
struct FeatureLayout {
  std::vector<std::vector<double>> class_means;
  std::vector<std::vector<double>> anomaly_centres;
  std::vector<double> class_weights;
  /// Per-class pixel noise standard deviation.
  std::vector<double> class_sigmas;
};

struct Corpus {
  std::vector<Scene> train;
  std::vector<Scene> val;
  std::vector<Scene> test;
  FeatureLayout layout;
};

/// Throws InvalidArgument on a config the generator cannot honour.
void validate_config(const CorpusConfig& config);

/// Deterministic per config.seed. Throws InvalidArgument if the separation
/// invariants cannot be met.
FeatureLayout make_layout(const CorpusConfig& config);

Corpus generate_corpus(const CorpusConfig& config);

using SubsetPartition = std::vector<std::vector<std::uint16_t>>;

/// k disjoint subsets covering {0..N-1}; sizes differ by at most one.
SubsetPartition partition_classes(std::size_t num_classes, std::size_t k, std::uint64_t seed);

/// For the icosahedral layout: four vertex-disjoint faces whose centroids form
/// a regular tetrahedron. The rotation group of that tetrahedron permutes the
/// four subsets, so every subset plays an identical role.
SubsetPartition icosahedral_partition(const FeatureLayout& layout);

/// Validates disjointness and coverage.
void validate_partition(const SubsetPartition& partition, std::size_t num_classes);

struct Relabeled {
  std::vector<Scene> scenes;
  /// old class -> new class, or nullopt for classes turned into anomalies.
  std::vector<std::optional<std::uint16_t>> forward;
  /// new class -> old class.
  std::vector<std::uint16_t> inverse;
};

/// Classes in `anomaly_subset` become kAnomalyLabel / kUnknown; the rest are
/// re-indexed densely in ascending order.
Relabeled relabel_as_known_unknown(const std::vector<Scene>& scenes, const std::vector<std::uint16_t>& anomaly_subset);

// --- Scene file -------------------------------------------------------------
//
// "ASEG", version byte (1), u32 LE C, H, W, N; C·H·W f64 LE features in
// channel-major row-major order; H·W u16 LE labels; H·W role bytes.

inline constexpr std::uint8_t kSceneFormatVersion = 1;

std::vector<std::uint8_t> encode_scene(const Scene& scene);
Scene decode_scene(const std::vector<std::uint8_t>& bytes);

void write_scene(const std::filesystem::path& path, const Scene& scene);
Scene read_scene(const std::filesystem::path& path);

// --- Manifest ---------------------------------------------------------------
//
// One entry per line: "<split> <relative path>[ <adversarial class>]".

struct ManifestEntry {
  std::string split;
  std::string path;
  std::optional<std::uint16_t> adversarial_class;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace asl::scenes
