#include "asl/aaft.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace asl::aaft {

using grad::NodeId;
using grad::Tensor;

std::string_view loss_name(UnknownLoss loss) { return loss == UnknownLoss::kKL ? "KL" : "ER"; }

UnknownLoss parse_loss(std::string_view text) {
  std::string upper(text);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "KL") return UnknownLoss::kKL;
  if (upper == "ER") return UnknownLoss::kER;
  throw InvalidArgument("unknown loss '" + std::string(text) + "' (expected KL or ER)");
}

void validate_config(const LossConfig& config) {
  if (!(config.alpha >= 0.0) || !std::isfinite(config.alpha)) throw InvalidArgument("alpha must be non-negative");
  if (config.r && (!(*config.r > 0.0) || !std::isfinite(*config.r))) throw InvalidArgument("r must be positive");
}

double default_regularizer(std::size_t num_classes) {
  if (num_classes < 2) throw InvalidArgument("the regularizer needs at least two classes");
  return 0.01 * std::log(static_cast<double>(num_classes));
}

double resolved_regularizer(const LossConfig& config, std::size_t num_classes) {
  return config.r ? *config.r : default_regularizer(num_classes);
}

namespace {

void check_row(std::span<const double> row) {
  if (row.size() < 2) throw InvalidArgument("a distribution needs at least two entries");
  double sum = 0.0;
  for (double v : row) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("distribution entries must be non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InvalidArgument("distribution does not sum to 1");
}

}  // namespace

double kl_uniform_loss(std::span<const double> row) {
  check_row(row);
  const double n = static_cast<double>(row.size());
  double acc = 0.0;
  for (double v : row) acc += std::log(std::max(v, kProbabilityFloor));
  return -acc / n - std::log(n);
}

double shannon_entropy(std::span<const double> row) {
  check_row(row);
  double h = 0.0;
  for (double v : row) h -= v * std::log(std::max(v, kProbabilityFloor));
  return h;
}

double entropy_ratio_loss(std::span<const double> row, double r) {
  if (!(r > 0.0)) throw InvalidArgument("r must be positive");
  const double hu = std::log(static_cast<double>(row.size()));
  return (hu + r) / (shannon_entropy(row) + r) - 1.0;
}

NodeId unknown_loss_rows(grad::Graph& graph, NodeId probs, std::size_t num_classes, UnknownLoss loss, double r) {
  const double n = static_cast<double>(num_classes);
  const NodeId logp = graph.log(probs, kProbabilityFloor);
  if (loss == UnknownLoss::kKL) {
    return graph.add_scalar(graph.scale(graph.row_sum(logp), -1.0 / n), -std::log(n));
  }
  const double hu = std::log(n);
  const NodeId entropy = graph.scale(graph.row_sum(graph.mul(probs, logp)), -1.0);
  return graph.add_scalar(graph.scale(graph.reciprocal(graph.add_scalar(entropy, r)), hu + r), -1.0);
}

namespace {

struct Built {
  grad::Graph graph;
  NodeId input = 0;
  seg::SegModel::Wiring wiring;
  NodeId known = 0;
  std::optional<NodeId> unknown;
  NodeId total = 0;
};

void build(Built& b, const seg::SegModel& model, const seg::PixelBatch& batch, const LossConfig& config) {
  b.input = b.graph.input("patches", batch.patches.shape());
  b.wiring = model.attach(b.graph, b.input);
  b.known = seg::cross_entropy_term(b.graph, b.wiring.logits, batch);
  b.total = b.known;
  // With alpha = 0 the graph is exactly the supervised one.
  if (config.alpha == 0.0) return;
  std::vector<std::uint8_t> mask(batch.outlier.begin(), batch.outlier.end());
  const NodeId probs = b.graph.softmax(b.wiring.logits);
  const double r = resolved_regularizer(config, model.num_classes());
  const NodeId rows = unknown_loss_rows(b.graph, probs, model.num_classes(), config.unknown_loss, r);
  b.unknown = b.graph.masked_mean(rows, std::move(mask));
  b.total = b.graph.add(b.known, b.graph.scale(*b.unknown, config.alpha));
}

}  // namespace

seg::Objective combined_objective(const seg::SegModel& model, const seg::PixelBatch& batch, const LossConfig& config) {
  validate_config(config);
  if (batch.size() == 0) throw InvalidArgument("batch has neither known nor synthetic-unknown pixels");
  Built b;
  build(b, model, batch, config);
  b.graph.set_loss(b.total);
  grad::Bindings bindings;
  bindings.emplace(b.input, batch.patches);
  model.bind(bindings, b.wiring);
  const grad::Values values = grad::forward(b.graph, bindings);
  const grad::GradientBundle grads = grad::backward(b.graph, values);
  return {values[b.total].item(), model.flatten_gradient(grads, b.wiring)};
}

TermValues evaluate_terms(const seg::SegModel& model, std::span<const Scene* const> scenes,
                          std::span<const seg::PixelRef> pool, const LossConfig& config) {
  validate_config(config);
  constexpr std::size_t kChunk = 4096;
  const std::size_t n = model.num_classes();
  const double r = resolved_regularizer(config, n);
  TermValues out;
  double known = 0.0;
  double unknown = 0.0;
  std::vector<double> probs(n);
  for (std::size_t start = 0; start < pool.size(); start += kChunk) {
    const std::size_t end = std::min(pool.size(), start + kChunk);
    const seg::PixelBatch batch = seg::make_batch(scenes, pool.subspan(start, end - start), model.shape().patch_radius);
    const Tensor logits = seg::predict_rows(model, batch.patches);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double* row = logits.data().data() + i * n;
      const double m = *std::max_element(row, row + n);
      double z = 0.0;
      for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - m);
      if (!batch.outlier[i]) {
        known += m + std::log(z) - row[batch.labels[i]];
        ++out.known_count;
      } else {
        for (std::size_t c = 0; c < n; ++c) probs[c] = std::exp(row[c] - m) / z;
        unknown += config.unknown_loss == UnknownLoss::kKL ? kl_uniform_loss(probs) : entropy_ratio_loss(probs, r);
        ++out.unknown_count;
      }
    }
  }
  if (out.known_count) out.known = known / static_cast<double>(out.known_count);
  if (out.unknown_count) out.unknown = unknown / static_cast<double>(out.unknown_count);
  return out;
}

std::string report_csv(const FinetuneReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_Lk,mean_unknown_loss\n";
  os << 0 << ',' << report.initial_known_loss << ',' << report.initial_unknown_loss << '\n';
  for (std::size_t e = 0; e < report.mean_known_loss.size(); ++e) {
    os << e + 1 << ',' << report.mean_known_loss[e] << ',' << report.mean_unknown_loss[e] << '\n';
  }
  return os.str();
}

FinetuneResult train_combined(seg::SegModel model, std::span<const Scene* const> scenes,
                              const seg::PixelSelection& selection, const LossConfig& config,
                              const seg::SgdOptions& options) {
  validate_config(config);
  seg::validate_sgd(options);
  for (const Scene* s : scenes) {
    if (s->num_classes != model.num_classes()) throw InvalidArgument("scene class count does not match the model");
    if (s->channels() != model.shape().channels) throw InvalidArgument("scene channel count does not match the model");
  }
  const std::vector<seg::PixelRef> pool = seg::collect_pixels(scenes, selection);
  if (pool.empty()) throw InvalidArgument("no training pixels");

  FinetuneResult result{std::move(model), {}};
  FinetuneReport& report = result.report;
  const TermValues initial = evaluate_terms(result.model, scenes, pool, config);
  report.initial_known_loss = initial.known;
  report.initial_unknown_loss = initial.unknown;

  const seg::ObjectiveFn objective = [&config](const seg::SegModel& m, const seg::PixelBatch& b) {
    return combined_objective(m, b, config);
  };
  seg::run_sgd(result.model, scenes, pool, options, objective, [&](std::size_t, const seg::SegModel& m) {
    const TermValues t = evaluate_terms(m, scenes, pool, config);
    report.mean_known_loss.push_back(t.known);
    report.mean_unknown_loss.push_back(t.unknown);
  });
  report.epochs = options.epochs;
  return result;
}

FinetuneResult finetune(seg::SegModel model, std::span<const Scene> train_scenes,
                        std::span<const Scene> auxiliary_scenes, const LossConfig& config,
                        const seg::SgdOptions& options) {
  std::vector<const Scene*> ptrs;
  std::size_t synth = 0;
  for (const Scene& s : auxiliary_scenes) synth += s.count_role(PixelRole::kSynthUnknown);
  if (auxiliary_scenes.empty() || synth == 0) {
    throw InvalidArgument("fine-tuning needs a non-empty auxiliary set with synthetic-unknown pixels");
  }
  for (const Scene& s : train_scenes) {
    if (s.count_role(PixelRole::kKnown) != s.pixel_count()) {
      throw InvalidArgument("training scenes must contain only known pixels");
    }
    ptrs.push_back(&s);
  }
  for (const Scene& s : auxiliary_scenes) ptrs.push_back(&s);

  seg::PixelSelection selection;
  selection.synth_unknown_as_outlier = true;
  FinetuneResult result = train_combined(std::move(model), ptrs, selection, config, options);
  if (options.epochs > 0 && config.alpha > 0.0) {
    const FinetuneReport& r = result.report;
    if (!(r.mean_unknown_loss.back() < r.initial_unknown_loss)) {
      throw seg::TrainingError("mean unknown loss did not decrease (" + std::to_string(r.initial_unknown_loss) +
                               " -> " + std::to_string(r.mean_unknown_loss.back()) + ")");
    }
  }
  return result;
}

}  // namespace asl::aaft
