#include "asl/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace asl::seg {

using grad::Tensor;

std::vector<PixelRef> collect_pixels(std::span<const Scene* const> scenes, const PixelSelection& selection) {
  std::vector<PixelRef> refs;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = *scenes[s];
    for (std::size_t p = 0; p < scene.pixel_count(); ++p) {
      const PixelRole role = scene.roles[p];
      const bool take = (role == PixelRole::kKnown && selection.known) ||
                        (role == PixelRole::kSynthUnknown && selection.synth_unknown_as_outlier) ||
                        (role == PixelRole::kUnknown && selection.unknown_as_outlier);
      if (take) refs.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(p)});
    }
  }
  return refs;
}

PixelBatch make_batch(std::span<const Scene* const> scenes, std::span<const PixelRef> refs, std::size_t radius) {
  if (refs.empty()) throw InvalidArgument("empty pixel batch");
  const Scene& first = *scenes[refs.front().scene];
  const std::size_t k = 2 * radius + 1;
  const std::size_t width = first.channels() * k * k;
  PixelBatch batch;
  batch.patches = Tensor({refs.size(), width});
  batch.labels.resize(refs.size());
  batch.outlier.resize(refs.size());

  // Gather scene by scene so each image is walked once per batch.
  std::size_t start = 0;
  std::vector<std::size_t> pixels;
  while (start < refs.size()) {
    std::size_t end = start;
    pixels.clear();
    while (end < refs.size() && refs[end].scene == refs[start].scene) pixels.push_back(refs[end++].pixel);
    const Scene& scene = *scenes[refs[start].scene];
    const Tensor rows = extract_patches(scene.features, radius, pixels);
    if (rows.dim(1) != width) throw InvalidArgument("scenes in a batch disagree on channel count");
    std::copy(rows.data().begin(), rows.data().end(), batch.patches.data().begin() + static_cast<std::ptrdiff_t>(start * width));
    for (std::size_t i = start; i < end; ++i) {
      const std::uint16_t label = scene.labels[refs[i].pixel];
      const bool outlier = scene.roles[refs[i].pixel] != PixelRole::kKnown;
      batch.outlier[i] = outlier ? 1 : 0;
      batch.labels[i] = outlier ? 0 : label;
    }
    start = end;
  }
  return batch;
}

grad::NodeId cross_entropy_term(grad::Graph& graph, grad::NodeId logits, const PixelBatch& batch) {
  std::vector<std::uint8_t> known(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) known[i] = batch.outlier[i] ? 0 : 1;
  const grad::NodeId picked = graph.pick_per_row(graph.log_softmax(logits), batch.labels);
  return graph.masked_mean(graph.scale(picked, -1.0), std::move(known));
}

Objective cross_entropy_objective(const SegModel& model, const PixelBatch& batch) {
  grad::Graph graph;
  const grad::NodeId x = graph.input("patches", batch.patches.shape());
  const auto wiring = model.attach(graph, x);
  const grad::NodeId loss = cross_entropy_term(graph, wiring.logits, batch);
  graph.set_loss(loss);

  grad::Bindings bindings;
  bindings.emplace(x, batch.patches);
  model.bind(bindings, wiring);
  const grad::Values values = grad::forward(graph, bindings);
  const grad::GradientBundle grads = grad::backward(graph, values);
  return {values[loss].item(), model.flatten_gradient(grads, wiring)};
}

void validate_sgd(const SgdOptions& options) {
  if (!(options.lr > 0.0)) throw InvalidArgument("learning rate must be positive");
}

double sgd_step(SegModel& model, const PixelBatch& batch, double lr, const ObjectiveFn& objective) {
  Objective obj = objective(model, batch);
  Tensor params = model.params();
  auto p = params.data();
  auto g = obj.gradient.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  if (!params.all_finite()) throw TrainingError("parameters diverged to non-finite values");
  model.set_params(std::move(params));
  return obj.value;
}

std::vector<double> run_sgd(SegModel& model, std::span<const Scene* const> scenes, std::span<const PixelRef> pool,
                            const SgdOptions& options, const ObjectiveFn& objective, const EpochHook& after_epoch) {
  validate_sgd(options);
  std::vector<double> epoch_loss;
  if (options.epochs == 0) return epoch_loss;
  if (pool.empty()) throw InvalidArgument("no training pixels");

  std::vector<PixelRef> order(pool.begin(), pool.end());
  const std::size_t batch = options.batch == 0 ? order.size() : options.batch;
  std::vector<PixelRef> slice;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    if (options.shuffle) {
      std::seed_seq seq{options.seed, static_cast<std::uint64_t>(epoch)};
      std::mt19937_64 rng(seq);
      std::shuffle(order.begin(), order.end(), rng);
    }
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      slice.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      // Grouping by scene only changes gather order, not the batch contents.
      std::stable_sort(slice.begin(), slice.end(), [](const PixelRef& a, const PixelRef& b) { return a.scene < b.scene; });
      total += sgd_step(model, make_batch(scenes, slice, model.shape().patch_radius), options.lr, objective);
      ++steps;
    }
    epoch_loss.push_back(total / static_cast<double>(steps));
    if (after_epoch) after_epoch(epoch, model);
  }
  return epoch_loss;
}

double mean_cross_entropy(const SegModel& model, std::span<const Scene* const> scenes, std::span<const PixelRef> pool) {
  if (pool.empty()) throw InvalidArgument("no pixels to evaluate");
  constexpr std::size_t kChunk = 4096;
  const std::size_t N = model.num_classes();
  double total = 0.0;
  for (std::size_t start = 0; start < pool.size(); start += kChunk) {
    const std::size_t end = std::min(pool.size(), start + kChunk);
    const PixelBatch batch = make_batch(scenes, pool.subspan(start, end - start), model.shape().patch_radius);
    const Tensor logits = predict_rows(model, batch.patches);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double* row = logits.data().data() + i * N;
      const double m = *std::max_element(row, row + N);
      double z = 0.0;
      for (std::size_t c = 0; c < N; ++c) z += std::exp(row[c] - m);
      total += m + std::log(z) - row[batch.labels[i]];
    }
  }
  return total / static_cast<double>(pool.size());
}

TrainResult train_supervised(SegModel model, std::span<const Scene> scenes, const SgdOptions& options) {
  validate_sgd(options);
  std::vector<const Scene*> ptrs;
  for (const Scene& s : scenes) {
    if (s.num_classes != model.num_classes()) throw InvalidArgument("scene class count does not match the model");
    if (s.channels() != model.shape().channels) throw InvalidArgument("scene channel count does not match the model");
    if (s.contains_class(kAnomalyLabel)) throw InvalidArgument("anomaly labels are not allowed in training scenes");
  }
  for (const Scene& s : scenes) ptrs.push_back(&s);
  const std::vector<PixelRef> pool = collect_pixels(ptrs, PixelSelection{});

  TrainResult result{model, {}, 0.0, 0.0};
  if (options.epochs == 0) return result;
  result.initial_loss = mean_cross_entropy(model, ptrs, pool);
  result.epoch_loss = run_sgd(result.model, ptrs, pool, options, cross_entropy_objective);
  result.final_loss = mean_cross_entropy(result.model, ptrs, pool);
  if (!(result.final_loss < result.initial_loss)) {
    throw TrainingError("training cross-entropy did not decrease (" + std::to_string(result.initial_loss) + " -> " +
                        std::to_string(result.final_loss) + ")");
  }
  return result;
}

}  // namespace asl::seg
