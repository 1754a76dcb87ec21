#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "asl/evalkit.hpp"
#include "asl/parallel.hpp"

namespace asl::eval {

using grad::Tensor;

ScoredPixels score_pixels(const seg::SegModel& model, const std::vector<Scene>& scenes, const TruthFn& truth) {
  std::vector<ScoredPixels> parts(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const Scene& scene = scenes[i];
    const seg::ScoreMap msp = seg::msp_score(seg::softmax_map(seg::predict_logits(model, scene.features)));
    for (std::size_t p = 0; p < scene.pixel_count(); ++p) {
      const auto t = truth(scene, p);
      if (!t) continue;
      parts[i].scores.push_back(1.0 - msp.values[p]);
      parts[i].truth.push_back(*t);
    }
  });
  ScoredPixels out;
  for (const ScoredPixels& part : parts) {
    out.scores.insert(out.scores.end(), part.scores.begin(), part.scores.end());
    out.truth.insert(out.truth.end(), part.truth.begin(), part.truth.end());
  }
  return out;
}

MetricReport evaluate_anomaly(const seg::SegModel& model, const std::vector<Scene>& test_scenes, double target_tpr) {
  std::size_t unknown = 0;
  for (const Scene& s : test_scenes) unknown += s.count_role(PixelRole::kUnknown);
  if (unknown == 0) throw InvalidArgument("test split has no UNKNOWN pixels to evaluate");
  const ScoredPixels sp = score_pixels(model, test_scenes, [](const Scene& s, std::size_t p) -> std::optional<std::uint8_t> {
    return s.roles[p] == PixelRole::kUnknown ? 1 : 0;
  });
  return compute_metrics(sp, target_tpr);
}

void validate_deltas(std::span<const double> deltas) {
  if (deltas.empty()) throw InvalidArgument("threshold grid is empty");
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (!(deltas[i] >= 0.0 && deltas[i] <= 1.0)) throw InvalidArgument("threshold outside [0, 1]");
    if (i > 0 && !(deltas[i] > deltas[i - 1])) throw InvalidArgument("threshold grid must be strictly increasing");
  }
}

std::vector<double> uniform_deltas(std::size_t count) {
  if (count < 2) throw InvalidArgument("a uniform threshold grid needs at least two points");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(i) / static_cast<double>(count - 1);
  return out;
}

SweepCurve threshold_sweep(const seg::SegModel& model, const std::vector<Scene>& test_scenes,
                           std::span<const double> deltas) {
  validate_deltas(deltas);
  std::size_t known = 0;
  std::size_t unknown = 0;
  for (const Scene& s : test_scenes) {
    known += s.count_role(PixelRole::kKnown);
    unknown += s.count_role(PixelRole::kUnknown);
  }
  if (known == 0 || unknown == 0) throw InvalidArgument("threshold sweep needs both KNOWN and UNKNOWN test pixels");

  // Per scene and threshold: correctly classified known pixels, detected unknown pixels.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> counts(test_scenes.size());
  parallel_for(test_scenes.size(), [&](std::size_t i) {
    const Scene& scene = test_scenes[i];
    const Tensor probs = seg::softmax_map(seg::predict_logits(model, scene.features));
    counts[i].resize(deltas.size());
    for (std::size_t d = 0; d < deltas.size(); ++d) {
      const auto decision = seg::classify_with_threshold(probs, deltas[d]);
      auto& [sem, anom] = counts[i][d];
      for (std::size_t p = 0; p < scene.pixel_count(); ++p) {
        if (scene.roles[p] == PixelRole::kKnown) {
          sem += decision[p] == static_cast<std::int32_t>(scene.labels[p]) ? 1 : 0;
        } else if (scene.roles[p] == PixelRole::kUnknown) {
          anom += decision[p] == seg::kAnomalyDecision ? 1 : 0;
        }
      }
    }
  });

  SweepCurve curve;
  for (std::size_t d = 0; d < deltas.size(); ++d) {
    std::size_t sem = 0;
    std::size_t anom = 0;
    for (const auto& c : counts) {
      sem += c[d].first;
      anom += c[d].second;
    }
    curve.push_back({deltas[d], static_cast<double>(sem) / static_cast<double>(known),
                     static_cast<double>(anom) / static_cast<double>(unknown)});
  }
  return curve;
}

std::string curves_csv(const SweepCurve& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "delta,semantic_acc,anomaly_acc\n";
  for (const SweepPoint& p : curve) os << p.delta << ',' << p.semantic_acc << ',' << p.anomaly_acc << '\n';
  return os.str();
}

namespace {

void summarize(const std::vector<MetricReport>& rows, MetricReport& average, MetricReport& spread) {
  average = {};
  spread = {};
  if (rows.empty()) return;
  auto fold = [&](double MetricReport::*field) {
    double sum = 0.0;
    double lo = rows.front().*field;
    double hi = lo;
    for (const MetricReport& r : rows) {
      sum += r.*field;
      lo = std::min(lo, r.*field);
      hi = std::max(hi, r.*field);
    }
    average.*field = sum / static_cast<double>(rows.size());
    spread.*field = hi - lo;
  };
  fold(&MetricReport::aupr);
  fold(&MetricReport::auroc);
  fold(&MetricReport::fpr95);
  fold(&MetricReport::aupr_random_guess);
}

}  // namespace

PilotTable pilot_study(const scenes::Corpus& corpus, const scenes::SubsetPartition& partition,
                       const PilotConfig& config) {
  if (corpus.train.empty() || corpus.test.empty()) throw InvalidArgument("pilot needs train and test scenes");
  const std::size_t n = corpus.train.front().num_classes;
  scenes::validate_partition(partition, n);
  aaft::validate_config(config.loss);
  seg::validate_sgd(config.train);

  PilotTable table;
  table.rows.resize(partition.size());
  parallel_for(partition.size(), [&](std::size_t k) {
    PilotRow& row = table.rows[k];
    row.subset = partition[k];
    try {
      const scenes::Relabeled train = scenes::relabel_as_known_unknown(corpus.train, row.subset);
      seg::ModelShape shape = config.model;
      shape.num_classes = n - row.subset.size();
      shape.channels = corpus.train.front().channels();
      seg::SegModel model = seg::SegModel::initialize(shape, config.seed);

      std::vector<const Scene*> ptrs;
      for (const Scene& s : train.scenes) ptrs.push_back(&s);
      seg::PixelSelection selection;
      selection.unknown_as_outlier = true;
      model = aaft::train_combined(std::move(model), ptrs, selection, config.loss, config.train).model;

      const std::set<std::uint16_t> subset(row.subset.begin(), row.subset.end());
      const auto in_subset = [&subset](const Scene& s, std::size_t p) {
        return s.roles[p] == PixelRole::kKnown && subset.count(s.labels[p]) > 0;
      };
      const ScoredPixels sub = score_pixels(model, corpus.test, [&](const Scene& s, std::size_t p) -> std::optional<std::uint8_t> {
        if (s.roles[p] != PixelRole::kKnown) return std::nullopt;
        return in_subset(s, p) ? 1 : 0;
      });
      const ScoredPixels anom = score_pixels(model, corpus.test, [&](const Scene& s, std::size_t p) -> std::optional<std::uint8_t> {
        if (s.roles[p] == PixelRole::kUnknown) return 1;
        if (in_subset(s, p)) return std::nullopt;
        return 0;
      });
      row.subset_metrics = compute_metrics(sub, config.target_tpr);
      row.anomaly_metrics = compute_metrics(anom, config.target_tpr);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
  });

  std::vector<MetricReport> sub;
  std::vector<MetricReport> anom;
  for (const PilotRow& r : table.rows) {
    if (r.failed) continue;
    sub.push_back(r.subset_metrics);
    anom.push_back(r.anomaly_metrics);
  }
  summarize(sub, table.subset_average, table.subset_spread);
  summarize(anom, table.anomaly_average, table.anomaly_spread);
  return table;
}

std::string pilot_csv(const PilotTable& table, bool anomaly) {
  std::ostringstream os;
  os.precision(17);
  os << "subset,aupr,auroc,fpr95,aupr_random_guess\n";
  auto line = [&os](const std::string& name, const MetricReport& m) {
    os << name << ',' << m.aupr << ',' << m.auroc << ',' << m.fpr95 << ',' << m.aupr_random_guess << '\n';
  };
  for (const PilotRow& r : table.rows) {
    std::string name;
    for (std::size_t i = 0; i < r.subset.size(); ++i) name += (i ? "-" : "") + std::to_string(r.subset[i]);
    if (r.failed) {
      os << name << ",failed,failed,failed,failed\n";
      continue;
    }
    line(name, anomaly ? r.anomaly_metrics : r.subset_metrics);
  }
  line("sub_average", anomaly ? table.anomaly_average : table.subset_average);
  line("spread", anomaly ? table.anomaly_spread : table.subset_spread);
  return os.str();
}

}  // namespace asl::eval
