#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "asl/evalkit.hpp"

namespace asl::eval {

std::size_t ScoredPixels::positives() const {
  return static_cast<std::size_t>(std::count_if(truth.begin(), truth.end(), [](std::uint8_t t) { return t != 0; }));
}

std::size_t ScoredPixels::negatives() const { return truth.size() - positives(); }

namespace {

void check(const ScoredPixels& sp, bool need_negative) {
  if (sp.scores.size() != sp.truth.size()) throw InvalidArgument("scores and truth differ in length");
  for (double s : sp.scores) {
    if (!std::isfinite(s)) throw InvalidArgument("non-finite anomaly score");
  }
  if (sp.positives() == 0) throw InvalidArgument("metric needs at least one positive pixel");
  if (need_negative && sp.negatives() == 0) throw InvalidArgument("metric needs at least one negative pixel");
}

/// Positive and negative counts per distinct score, highest score first.
struct Group {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

std::vector<Group> descending_groups(const ScoredPixels& sp) {
  std::vector<std::size_t> order(sp.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sp.scores[a] > sp.scores[b]; });
  std::vector<Group> groups;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i == 0 || sp.scores[order[i]] != sp.scores[order[i - 1]]) groups.emplace_back();
    if (sp.truth[order[i]]) {
      ++groups.back().pos;
    } else {
      ++groups.back().neg;
    }
  }
  return groups;
}

}  // namespace

double auroc(const ScoredPixels& sp) {
  check(sp, true);
  const auto groups = descending_groups(sp);
  // Count, for each positive, the negatives strictly below it plus half the tied ones.
  const double P = static_cast<double>(sp.positives());
  const double N = static_cast<double>(sp.negatives());
  double neg_above = 0.0;
  double wins = 0.0;
  for (const Group& g : groups) {
    const double below = N - neg_above - static_cast<double>(g.neg);
    wins += static_cast<double>(g.pos) * (below + 0.5 * static_cast<double>(g.neg));
    neg_above += static_cast<double>(g.neg);
  }
  return wins / (P * N);
}

double aupr(const ScoredPixels& sp) {
  check(sp, false);
  const auto groups = descending_groups(sp);
  const double P = static_cast<double>(sp.positives());
  double tp = 0.0;
  double fp = 0.0;
  double ap = 0.0;
  for (const Group& g : groups) {
    tp += static_cast<double>(g.pos);
    fp += static_cast<double>(g.neg);
    if (g.pos) ap += (static_cast<double>(g.pos) / P) * (tp / (tp + fp));
  }
  return ap;
}

double fpr_at_tpr(const ScoredPixels& sp, double target_tpr) {
  check(sp, true);
  if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw InvalidArgument("target TPR must lie in (0, 1]");
  const auto groups = descending_groups(sp);
  const double P = static_cast<double>(sp.positives());
  const double N = static_cast<double>(sp.negatives());
  double tp = 0.0;
  double fp = 0.0;
  for (const Group& g : groups) {
    tp += static_cast<double>(g.pos);
    fp += static_cast<double>(g.neg);
    if (tp / P >= target_tpr) return fp / N;
  }
  return 1.0;
}

MetricReport compute_metrics(const ScoredPixels& sp, double target_tpr) {
  MetricReport r;
  r.aupr = aupr(sp);
  r.auroc = auroc(sp);
  r.fpr95 = fpr_at_tpr(sp, target_tpr);
  r.aupr_random_guess = static_cast<double>(sp.positives()) / static_cast<double>(sp.scores.size());
  return r;
}

std::string metrics_csv(const MetricReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "metric,value\n";
  os << "aupr," << report.aupr << '\n';
  os << "auroc," << report.auroc << '\n';
  os << "fpr95," << report.fpr95 << '\n';
  os << "aupr_random_guess," << report.aupr_random_guess << '\n';
  return os.str();
}

}  // namespace asl::eval
