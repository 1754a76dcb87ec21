#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>

#include "asl/error.hpp"
#include "asl/parallel.hpp"
#include "asl/scenes.hpp"

namespace asl::scenes {

namespace {

using Rng = std::mt19937_64;
using Point = std::vector<double>;

constexpr std::uint64_t kLayoutStream = 0x4c41594f;
enum class Split : std::uint64_t { kTrain = 1, kVal = 2, kTest = 3 };

double distance(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double nearest(const Point& p, const std::vector<Point>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const Point& q : set) best = std::min(best, distance(p, q));
  return best;
}

FeatureLayout random_layout(const CorpusConfig& cfg) {
  std::seed_seq seq{cfg.seed, kLayoutStream};
  Rng rng(seq);
  std::uniform_real_distribution<double> coord(-cfg.mean_scale, cfg.mean_scale);
  const double sep = cfg.min_separation_sigmas * cfg.noise_sigma;

  FeatureLayout layout;
  auto sample_point = [&] {
    Point p(cfg.channels);
    for (double& v : p) v = coord(rng);
    return p;
  };

  constexpr int kAttempts = 200000;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    int attempt = 0;
    for (; attempt < kAttempts; ++attempt) {
      Point p = sample_point();
      if (nearest(p, layout.class_means) >= sep) {
        layout.class_means.push_back(std::move(p));
        break;
      }
    }
    if (attempt == kAttempts) {
      throw InvalidArgument("cannot place " + std::to_string(cfg.num_classes) + " class means " +
                            std::to_string(sep) + " apart inside the configured box");
    }
  }

  // Anomaly centres sit in the gaps: clear of every class mean by the
  // separation margin but no further than 1.5x that margin from the nearest one.
  for (std::size_t k = 0; k < cfg.anomaly_components; ++k) {
    int attempt = 0;
    for (; attempt < kAttempts; ++attempt) {
      Point p = sample_point();
      const double d = nearest(p, layout.class_means);
      if (d >= sep && d <= 1.5 * sep && nearest(p, layout.anomaly_centres) >= sep) {
        layout.anomaly_centres.push_back(std::move(p));
        break;
      }
    }
    if (attempt == kAttempts) throw InvalidArgument("cannot place anomaly component in a feature-space gap");
  }

  std::vector<std::size_t> rank(cfg.num_classes);
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);
  layout.class_weights.resize(cfg.num_classes);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    layout.class_weights[c] = std::pow(cfg.frequency_skew, static_cast<double>(rank[c]));
  }
  layout.class_sigmas.assign(cfg.num_classes, cfg.noise_sigma);
  if (cfg.noise_spread != 1.0) {
    std::shuffle(rank.begin(), rank.end(), rng);
    const double steps = static_cast<double>(cfg.num_classes - 1);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      layout.class_sigmas[c] = cfg.noise_sigma * std::pow(cfg.noise_spread, static_cast<double>(rank[c]) / steps);
    }
  }
  return layout;
}

FeatureLayout icosahedral_layout(const CorpusConfig& cfg) {
  if (cfg.num_classes != 12 || cfg.channels != 3) {
    throw InvalidArgument("icosahedral layout requires 12 classes and 3 channels");
  }
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  const double s = cfg.mean_scale / 2.0;  // unit icosahedron below has edge length 2
  FeatureLayout layout;
  for (double a : {-1.0, 1.0}) {
    for (double b : {-1.0, 1.0}) {
      layout.class_means.push_back({0.0, a * s, b * phi * s});
      layout.class_means.push_back({a * s, b * phi * s, 0.0});
      layout.class_means.push_back({b * phi * s, 0.0, a * s});
    }
  }
  const double edge = cfg.mean_scale;
  auto is_edge = [&](std::size_t i, std::size_t j) {
    return std::abs(distance(layout.class_means[i], layout.class_means[j]) - edge) < 1e-9 * edge;
  };
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = i + 1; j < 12; ++j) {
      for (std::size_t k = j + 1; k < 12; ++k) {
        if (is_edge(i, j) && is_edge(j, k) && is_edge(i, k)) {
          Point c(3);
          for (std::size_t d = 0; d < 3; ++d) {
            c[d] = (layout.class_means[i][d] + layout.class_means[j][d] + layout.class_means[k][d]) / 3.0;
          }
          layout.anomaly_centres.push_back(std::move(c));
        }
      }
    }
  }
  layout.class_weights.assign(12, 1.0);
  layout.class_sigmas.assign(12, cfg.noise_sigma);
  return layout;
}

std::size_t sample_weighted(const std::vector<double>& weights, Rng& rng) {
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  return dist(rng);
}

// Paints a rectangle or an ellipse of the given extent at (top, left); clipped to the image.
template <typename Paint>
void paint_shape(std::size_t H, std::size_t W, long top, long left, std::size_t sh, std::size_t sw, bool ellipse,
                 Paint paint) {
  const double cy = static_cast<double>(top) + (static_cast<double>(sh) - 1.0) / 2.0;
  const double cx = static_cast<double>(left) + (static_cast<double>(sw) - 1.0) / 2.0;
  const double ry = static_cast<double>(sh) / 2.0;
  const double rx = static_cast<double>(sw) / 2.0;
  for (long h = std::max(0L, top); h < std::min<long>(static_cast<long>(H), top + static_cast<long>(sh)); ++h) {
    for (long w = std::max(0L, left); w < std::min<long>(static_cast<long>(W), left + static_cast<long>(sw)); ++w) {
      if (ellipse) {
        const double dy = (static_cast<double>(h) - cy) / ry;
        const double dx = (static_cast<double>(w) - cx) / rx;
        if (dy * dy + dx * dx > 1.0) continue;
      }
      paint(static_cast<std::size_t>(h) * W + static_cast<std::size_t>(w));
    }
  }
}

Scene make_scene(const CorpusConfig& cfg, const FeatureLayout& layout, Split split, std::size_t index) {
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)};
  Rng rng(seq);
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.channels, n = H * W;

  Scene scene;
  scene.num_classes = static_cast<std::uint32_t>(cfg.num_classes);
  scene.labels.assign(n, static_cast<std::uint16_t>(sample_weighted(layout.class_weights, rng)));
  scene.roles.assign(n, PixelRole::kKnown);

  auto uniform = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  const std::size_t shapes = uniform(cfg.shapes_min, cfg.shapes_max);
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto label = static_cast<std::uint16_t>(sample_weighted(layout.class_weights, rng));
    const std::size_t sh = uniform(cfg.shape_size_min, cfg.shape_size_max);
    const std::size_t sw = uniform(cfg.shape_size_min, cfg.shape_size_max);
    const long top = static_cast<long>(uniform(0, H + sh / 2)) - static_cast<long>(sh / 2);
    const long left = static_cast<long>(uniform(0, W + sw / 2)) - static_cast<long>(sw / 2);
    const bool ellipse = uniform(0, 1) == 1;
    paint_shape(H, W, top, left, sh, sw, ellipse, [&](std::size_t p) { scene.labels[p] = label; });
  }

  std::vector<std::size_t> component(n, 0);
  if (split == Split::kTest) {
    for (std::size_t a = 0; a < cfg.anomaly_shapes_per_scene; ++a) {
      const std::size_t k = uniform(0, layout.anomaly_centres.size() - 1);
      const std::size_t sh = uniform(cfg.anomaly_size_min, cfg.anomaly_size_max);
      const std::size_t sw = uniform(cfg.anomaly_size_min, cfg.anomaly_size_max);
      const long top = static_cast<long>(uniform(0, H - sh));
      const long left = static_cast<long>(uniform(0, W - sw));
      const bool ellipse = uniform(0, 1) == 1;
      paint_shape(H, W, top, left, sh, sw, ellipse, [&](std::size_t p) {
        scene.labels[p] = kAnomalyLabel;
        scene.roles[p] = PixelRole::kUnknown;
        component[p] = k;
      });
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> data(C * n);
  for (std::size_t p = 0; p < n; ++p) {
    const bool anomalous = scene.labels[p] == kAnomalyLabel;
    const Point& centre = anomalous ? layout.anomaly_centres[component[p]] : layout.class_means[scene.labels[p]];
    const double sigma = anomalous ? cfg.anomaly_sigma : layout.class_sigmas[scene.labels[p]];
    for (std::size_t c = 0; c < C; ++c) {
      data[c * n + p] = std::clamp(centre[c] + sigma * noise(rng), cfg.feature_lo, cfg.feature_hi);
    }
  }
  scene.features = grad::Tensor({C, H, W}, std::move(data));
  return scene;
}

std::vector<Scene> make_split(const CorpusConfig& cfg, const FeatureLayout& layout, Split split, std::size_t count) {
  std::vector<Scene> out(count);
  parallel_for(count, [&](std::size_t i) { out[i] = make_scene(cfg, layout, split, i); });
  return out;
}

}  // namespace

void validate_config(const CorpusConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes >= kAnomalyLabel) throw InvalidArgument("num_classes must be in [2, 65534]");
  if (cfg.channels == 0 || cfg.height == 0 || cfg.width == 0) throw InvalidArgument("image extents must be positive");
  if (!(cfg.noise_sigma > 0.0) || !(cfg.anomaly_sigma >= 0.0)) throw InvalidArgument("noise sigma must be positive");
  if (!(cfg.min_separation_sigmas > 0.0)) throw InvalidArgument("min_separation_sigmas must be positive");
  if (!(cfg.noise_spread >= 1.0)) throw InvalidArgument("noise_spread must be at least 1");
  if (cfg.layout == Layout::kIcosahedral && cfg.noise_spread != 1.0) {
    throw InvalidArgument("the icosahedral layout keeps every class noise scale equal");
  }
  if (!(cfg.mean_scale > 0.0)) throw InvalidArgument("mean_scale must be positive");
  if (!(cfg.frequency_skew > 0.0 && cfg.frequency_skew <= 1.0)) throw InvalidArgument("frequency_skew must be in (0, 1]");
  if (!(cfg.feature_lo < cfg.feature_hi)) throw InvalidArgument("feature_lo must be below feature_hi");
  if (cfg.shapes_min > cfg.shapes_max) throw InvalidArgument("shapes_min exceeds shapes_max");
  if (cfg.shape_size_min == 0 || cfg.shape_size_min > cfg.shape_size_max) throw InvalidArgument("bad shape size range");
  if (cfg.anomaly_shapes_per_scene > 0) {
    if (cfg.anomaly_size_min == 0 || cfg.anomaly_size_min > cfg.anomaly_size_max) {
      throw InvalidArgument("bad anomaly size range");
    }
    if (cfg.anomaly_size_max > cfg.height || cfg.anomaly_size_max > cfg.width) {
      throw InvalidArgument("anomaly shapes must fit inside the image");
    }
    if (cfg.layout == Layout::kRandom && cfg.anomaly_components == 0) {
      throw InvalidArgument("anomaly_components must be positive when anomalies are injected");
    }
  }
}

FeatureLayout make_layout(const CorpusConfig& cfg) {
  validate_config(cfg);
  FeatureLayout layout = cfg.layout == Layout::kIcosahedral ? icosahedral_layout(cfg) : random_layout(cfg);

  const double sep = cfg.min_separation_sigmas * cfg.noise_sigma;
  for (std::size_t i = 0; i < layout.class_means.size(); ++i) {
    for (std::size_t j = i + 1; j < layout.class_means.size(); ++j) {
      if (distance(layout.class_means[i], layout.class_means[j]) < sep) {
        throw InvalidArgument("class means " + std::to_string(i) + " and " + std::to_string(j) +
                              " are closer than the separation margin");
      }
    }
    for (double v : layout.class_means[i]) {
      if (v < cfg.feature_lo || v > cfg.feature_hi) throw InvalidArgument("class mean outside the feature range");
    }
  }
  for (const Point& a : layout.anomaly_centres) {
    if (nearest(a, layout.class_means) < sep) {
      throw InvalidArgument("anomaly component closer to a class mean than the separation margin");
    }
  }
  return layout;
}

Corpus generate_corpus(const CorpusConfig& cfg) {
  Corpus corpus;
  corpus.layout = make_layout(cfg);
  corpus.train = make_split(cfg, corpus.layout, Split::kTrain, cfg.train_scenes);
  corpus.val = make_split(cfg, corpus.layout, Split::kVal, cfg.val_scenes);
  corpus.test = make_split(cfg, corpus.layout, Split::kTest, cfg.test_scenes);
  return corpus;
}

}  // namespace asl::scenes
