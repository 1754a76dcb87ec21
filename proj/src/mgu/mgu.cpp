#include "asl/mgu.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "asl/parallel.hpp"

namespace asl::mgu {

using grad::Tensor;

void validate_config(const MguConfig& config) {
  if (!(config.step_size > 0.0) || !std::isfinite(config.step_size)) throw InvalidArgument("mgu step size must be positive");
  if (config.max_iters < 1) throw InvalidArgument("mgu max_iters must be at least 1");
  if (!(config.clip_lo < config.clip_hi)) throw InvalidArgument("mgu clip_lo must be below clip_hi");
  if (config.per_class_budget < 1) throw InvalidArgument("mgu per_class_budget must be at least 1");
}

PixelIndexSet::PixelIndexSet(std::size_t height, std::size_t width,
                             std::vector<std::pair<std::size_t, std::size_t>> pixels)
    : height_(height), width_(width) {
  flat_.reserve(pixels.size());
  for (const auto& [h, w] : pixels) {
    if (h >= height || w >= width) throw InvalidArgument("pixel index outside the image");
    flat_.push_back(h * width + w);
  }
  std::sort(flat_.begin(), flat_.end());
  if (std::adjacent_find(flat_.begin(), flat_.end()) != flat_.end()) throw InvalidArgument("duplicate pixel index");
}

PixelIndexSet PixelIndexSet::from_flat(std::size_t height, std::size_t width, std::vector<std::size_t> flat) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(flat.size());
  for (std::size_t p : flat) {
    if (width == 0 || p >= height * width) throw InvalidArgument("pixel index outside the image");
    pairs.emplace_back(p / width, p % width);
  }
  return PixelIndexSet(height, width, std::move(pairs));
}

std::vector<std::pair<std::size_t, std::size_t>> PixelIndexSet::pairs() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(flat_.size());
  for (std::size_t p : flat_) out.emplace_back(p / width_, p % width_);
  return out;
}

bool PixelIndexSet::contains(std::size_t flat_index) const {
  return std::binary_search(flat_.begin(), flat_.end(), flat_index);
}

std::string_view termination_name(Termination t) {
  switch (t) {
    case Termination::kEmptySet: return "EMPTY_SET";
    case Termination::kIterCap: return "ITER_CAP";
    case Termination::kReentryBlocked: return "REENTRY_BLOCKED";
    case Termination::kNoTarget: return "NO_TARGET";
    case Termination::kNonFinite: return "NON_FINITE";
  }
  return "?";
}

namespace {

void check_inputs(const seg::SegModel& model, const Tensor& image, const PixelIndexSet& active, std::size_t y_adv) {
  if (y_adv >= model.num_classes()) throw InvalidArgument("adversarial class out of range");
  if (image.rank() != 3 || image.dim(0) != model.shape().channels) {
    throw InvalidArgument("image shape " + grad::shape_string(image.shape()) + " does not match the model");
  }
  if (active.height() != image.dim(1) || active.width() != image.dim(2)) {
    throw InvalidArgument("pixel set does not match the image size");
  }
}

/// Predicted class of each listed pixel.
std::vector<std::size_t> predict_classes(const seg::SegModel& model, const Tensor& image,
                                         const std::vector<std::size_t>& pixels) {
  std::vector<std::size_t> out(pixels.size());
  if (pixels.empty()) return out;
  const Tensor logits = seg::predict_rows(model, seg::extract_patches(image, model.shape().patch_radius, pixels));
  const std::size_t n = model.num_classes();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    out[i] = seg::argmax(std::span<const double>(logits.data().data() + i * n, n));
  }
  return out;
}

}  // namespace

LossGradient mgu_loss_gradient(const seg::SegModel& model, const Tensor& image, const PixelIndexSet& active,
                               std::size_t y_adv) {
  check_inputs(model, image, active, y_adv);
  if (active.empty()) throw InvalidArgument("mgu loss needs a non-empty pixel set");

  grad::Graph graph;
  const grad::NodeId x = graph.input("image", image.shape());
  grad::PatchGeometry geom{image.dim(0), image.dim(1), image.dim(2), model.shape().patch_radius, active.flat()};
  const grad::NodeId patches = graph.patch_gather(x, std::move(geom));
  const auto wiring = model.attach(graph, patches);
  const grad::NodeId probs = graph.softmax(wiring.logits);
  const grad::NodeId picked = graph.pick_per_row(probs, std::vector<std::size_t>(active.size(), y_adv));
  const grad::NodeId loss = graph.mean(picked);
  graph.set_loss(loss);

  grad::Bindings bindings;
  bindings.emplace(x, image);
  model.bind(bindings, wiring);
  const grad::Values values = grad::forward(graph, bindings);
  grad::GradientBundle grads = grad::backward(graph, values);
  return {values[loss].item(), std::move(grads.input_grads.at(x))};
}

double mgu_loss(const seg::SegModel& model, const Tensor& image, const PixelIndexSet& active, std::size_t y_adv) {
  check_inputs(model, image, active, y_adv);
  if (active.empty()) throw InvalidArgument("mgu loss needs a non-empty pixel set");
  const Tensor logits =
      seg::predict_rows(model, seg::extract_patches(image, model.shape().patch_radius, active.flat()));
  const std::size_t n = model.num_classes();
  double total = 0.0;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const double* row = logits.data().data() + i * n;
    const double m = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - m);
    total += std::exp(row[y_adv] - m) / z;
  }
  return total / static_cast<double>(active.size());
}

MguResult masked_gradient_update(const seg::SegModel& model, const Scene& scene, std::size_t y_adv,
                                 const MguConfig& config) {
  validate_config(config);
  if (y_adv >= model.num_classes() || y_adv >= scene.num_classes) throw InvalidArgument("adversarial class out of range");
  if (scene.channels() != model.shape().channels) throw InvalidArgument("scene channel count does not match the model");

  const std::size_t H = scene.height();
  const std::size_t W = scene.width();
  const std::size_t HW = H * W;
  std::vector<std::size_t> target;
  for (std::size_t p = 0; p < HW; ++p) {
    if (scene.roles[p] == PixelRole::kKnown && scene.labels[p] == y_adv) target.push_back(p);
  }

  MguResult result{scene, {}, target.empty()};
  if (target.empty()) {
    result.trace.termination = Termination::kNoTarget;
    return result;
  }

  Tensor image = scene.features;
  std::vector<std::size_t> active = target;
  MguTrace& trace = result.trace;
  for (;;) {
    const std::vector<std::size_t> predicted = predict_classes(model, image, active);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (predicted[i] == y_adv) still.push_back(active[i]);
    }
    active = std::move(still);

    if (active.empty()) {
      const std::vector<std::size_t> final_pred = predict_classes(model, image, target);
      const bool any = std::find(final_pred.begin(), final_pred.end(), y_adv) != final_pred.end();
      trace.termination = any ? Termination::kReentryBlocked : Termination::kEmptySet;
      break;
    }
    if (trace.iterations == config.max_iters) {
      trace.termination = Termination::kIterCap;
      break;
    }

    const PixelIndexSet set = PixelIndexSet::from_flat(H, W, active);
    LossGradient lg;
    try {
      lg = mgu_loss_gradient(model, image, set, y_adv);
    } catch (const grad::GraphError& e) {
      trace.termination = Termination::kNonFinite;
      throw MguError(std::string("mgu aborted: ") + e.what(), trace);
    }
    if (!lg.image_grad.all_finite() || !std::isfinite(lg.value)) {
      trace.termination = Termination::kNonFinite;
      throw MguError("mgu aborted: non-finite gradient", trace);
    }
    trace.active_count.push_back(active.size());
    trace.loss.push_back(lg.value);

    auto x = image.data();
    const auto g = lg.image_grad.data();
    for (std::size_t c = 0; c < scene.channels(); ++c) {
      for (std::size_t p : active) {
        const std::size_t k = c * HW + p;
        x[k] = std::clamp(x[k] - config.step_size * g[k], config.clip_lo, config.clip_hi);
      }
    }
    ++trace.iterations;
  }

  result.scene.features = std::move(image);
  for (std::size_t p : target) {
    result.scene.labels[p] = kAnomalyLabel;
    result.scene.roles[p] = PixelRole::kSynthUnknown;
  }
  return result;
}

std::vector<std::vector<std::size_t>> select_sources(const std::vector<Scene>& scenes, std::size_t num_classes,
                                                     const MguConfig& config) {
  validate_config(config);
  std::vector<std::vector<std::size_t>> chosen(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      if (scenes[i].contains_class(static_cast<std::uint16_t>(c))) candidates.push_back(i);
    }
    if (candidates.empty()) continue;
    std::seed_seq seq{config.seed, static_cast<std::uint64_t>(c)};
    std::mt19937_64 rng(seq);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
    const std::size_t take = std::min(config.per_class_budget, candidates.size());
    for (std::size_t k = 0; k < take; ++k) chosen[c].push_back(candidates[(start + k) % candidates.size()]);
  }
  return chosen;
}

AuxiliarySet build_auxiliary_set(const seg::SegModel& model, const std::vector<Scene>& train_scenes,
                                 const MguConfig& config) {
  validate_config(config);
  const std::size_t n = model.num_classes();
  const auto sources = select_sources(train_scenes, n, config);

  AuxiliarySet out;
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t c = 0; c < n; ++c) {
    if (sources[c].empty()) {
      out.warnings.push_back("class " + std::to_string(c) + " does not occur in the corpus; skipped");
    }
    for (std::size_t idx : sources[c]) jobs.emplace_back(c, idx);
  }

  std::vector<AuxiliaryScene> built(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const auto [c, idx] = jobs[j];
    MguResult r = masked_gradient_update(model, train_scenes[idx], c, config);
    built[j] = AuxiliaryScene{std::move(r.scene), static_cast<std::uint16_t>(c), idx, r.empty_target, std::move(r.trace)};
  });
  out.scenes = std::move(built);
  return out;
}

std::string trace_csv(const MguTrace& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,active_count,loss\n";
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    os << i << ',' << trace.active_count[i] << ',' << trace.loss[i] << '\n';
  }
  return os.str();
}

}  // namespace asl::mgu
