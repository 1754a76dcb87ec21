#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "asl/aaft.hpp"
#include "asl/mgu.hpp"
#include "asl/scenes.hpp"

namespace asl::aaft {
namespace {

using grad::Tensor;

std::vector<double> random_distribution(std::size_t n, std::mt19937_64& rng, double concentration = 1.0) {
  std::gamma_distribution<double> g(concentration, 1.0);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = g(rng) + 1e-9;
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

double entropy_oracle(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) h -= v * std::log(v);
  return h;
}

TEST(Losses, WorkedExamples) {
  const std::vector<double> row{0.9, 0.1};
  // -(0.5 ln(0.9/0.5) + 0.5 ln(0.1/0.5))
  EXPECT_NEAR(kl_uniform_loss(row), 0.5108, 1e-4);
  const double hu = std::log(2.0);
  const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  EXPECT_NEAR(h, 0.3251, 1e-4);
  EXPECT_NEAR(entropy_ratio_loss(row, 0.01 * hu), 1.108, 1e-3);
}

TEST(Losses, ZeroAtUniform) {
  for (std::size_t n = 2; n <= 40; ++n) {
    const std::vector<double> u(n, 1.0 / static_cast<double>(n));
    EXPECT_NEAR(kl_uniform_loss(u), 0.0, 1e-9);
    EXPECT_NEAR(entropy_ratio_loss(u, default_regularizer(n)), 0.0, 1e-9);
  }
}

TEST(Losses, PositiveOffUniform) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 15);
    const std::vector<double> p = random_distribution(n, rng);
    EXPECT_GT(kl_uniform_loss(p), 0.0);
    EXPECT_GT(entropy_ratio_loss(p, default_regularizer(n)), 0.0);
  }
}

TEST(Losses, PermutationInvariant) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p = random_distribution(7, rng);
    const double kl = kl_uniform_loss(p);
    const double er = entropy_ratio_loss(p, 0.02);
    std::shuffle(p.begin(), p.end(), rng);
    EXPECT_NEAR(kl_uniform_loss(p), kl, 1e-12);
    EXPECT_NEAR(entropy_ratio_loss(p, 0.02), er, 1e-12);
  }
}

TEST(Losses, EntropyRatioStrictlyDecreasingInEntropy) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 11);
    const std::vector<double> a = random_distribution(n, rng, 0.5);
    const std::vector<double> b = random_distribution(n, rng, 0.5);
    const double ha = entropy_oracle(a);
    const double hb = entropy_oracle(b);
    if (std::abs(ha - hb) < 1e-9) continue;
    const double r = default_regularizer(n);
    if (ha < hb) {
      EXPECT_GT(entropy_ratio_loss(a, r), entropy_ratio_loss(b, r));
    } else {
      EXPECT_LT(entropy_ratio_loss(a, r), entropy_ratio_loss(b, r));
    }
  }
}

TEST(Losses, BothDecreaseAlongEntropyIncreasingPaths) {
  // Mixing a distribution towards uniform raises its entropy monotonically.
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 11);
    const std::vector<double> base = random_distribution(n, rng, 0.3);
    const double r = default_regularizer(n);
    double prev_h = -1.0;
    double prev_kl = 0.0;
    double prev_er = 0.0;
    for (double t : {0.0, 0.1, 0.3, 0.5, 0.8, 0.95}) {
      std::vector<double> p(n);
      for (std::size_t k = 0; k < n; ++k) p[k] = (1 - t) * base[k] + t / static_cast<double>(n);
      const double h = entropy_oracle(p);
      const double kl = kl_uniform_loss(p);
      const double er = entropy_ratio_loss(p, r);
      if (prev_h >= 0.0) {
        ASSERT_GT(h, prev_h);
        EXPECT_LT(kl, prev_kl);
        EXPECT_LT(er, prev_er);
      }
      prev_h = h;
      prev_kl = kl;
      prev_er = er;
    }
  }
}

TEST(Losses, KlIsNotGloballyOrderedByEntropy) {
  // (0.5, 0.5, ~0) has more entropy than (0.8, 0.1, 0.1) yet a larger KL to
  // uniform; only the entropy ratio orders every pair by entropy.
  const std::vector<double> a{0.5 - 5e-7, 0.5 - 5e-7, 1e-6};
  const std::vector<double> b{0.8, 0.1, 0.1};
  ASSERT_GT(shannon_entropy(a), shannon_entropy(b));
  EXPECT_GT(kl_uniform_loss(a), kl_uniform_loss(b));
  EXPECT_LT(entropy_ratio_loss(a, 0.01), entropy_ratio_loss(b, 0.01));
}

TEST(Losses, OneHotBoundedByRatio) {
  const double r = default_regularizer(12);
  std::vector<double> p(12, 0.0);
  p[3] = 1.0;
  const double er = entropy_ratio_loss(p, r);
  EXPECT_GT(er, 10.0);
  EXPECT_LE(er, std::log(12.0) / r);
  EXPECT_TRUE(std::isfinite(kl_uniform_loss(p)));
}

TEST(Losses, Errors) {
  EXPECT_THROW(kl_uniform_loss(std::vector<double>{0.5, 0.4}), InvalidArgument);
  EXPECT_THROW(kl_uniform_loss(std::vector<double>{1.0}), InvalidArgument);
  EXPECT_THROW(entropy_ratio_loss(std::vector<double>{0.5, 0.5}, 0.0), InvalidArgument);
}

TEST(Regularizer, Values) {
  EXPECT_DOUBLE_EQ(default_regularizer(12), std::log(12.0) * 0.01);
  EXPECT_DOUBLE_EQ(default_regularizer(2), std::log(2.0) * 0.01);
  for (std::size_t n = 2; n < 100; ++n) EXPECT_GT(default_regularizer(n), 0.0);
  EXPECT_THROW(default_regularizer(1), InvalidArgument);
  LossConfig c;
  EXPECT_DOUBLE_EQ(resolved_regularizer(c, 12), default_regularizer(12));
  c.r = 0.5;
  EXPECT_EQ(resolved_regularizer(c, 12), 0.5);
}

TEST(Config, ParseAndValidate) {
  EXPECT_EQ(parse_loss("kl"), UnknownLoss::kKL);
  EXPECT_EQ(parse_loss("ER"), UnknownLoss::kER);
  EXPECT_THROW(parse_loss("mse"), InvalidArgument);
  EXPECT_THROW(validate_config(LossConfig{-0.1, UnknownLoss::kER, std::nullopt}), InvalidArgument);
  EXPECT_THROW(validate_config(LossConfig{0.1, UnknownLoss::kER, 0.0}), InvalidArgument);
}

TEST(GraphLosses, MatchScalarFormulas) {
  std::mt19937_64 rng(5);
  const std::size_t n = 6, b = 5;
  Tensor probs({b, n});
  for (std::size_t i = 0; i < b; ++i) {
    const std::vector<double> p = random_distribution(n, rng);
    std::copy(p.begin(), p.end(), probs.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  for (UnknownLoss loss : {UnknownLoss::kKL, UnknownLoss::kER}) {
    grad::Graph g;
    const grad::NodeId x = g.input("p", {b, n});
    const grad::NodeId rows = unknown_loss_rows(g, x, n, loss, 0.03);
    const grad::Values v = grad::forward(g, {{x, probs}});
    for (std::size_t i = 0; i < b; ++i) {
      const std::span<const double> row(probs.data().data() + i * n, n);
      const double expected = loss == UnknownLoss::kKL ? kl_uniform_loss(row) : entropy_ratio_loss(row, 0.03);
      EXPECT_NEAR(v[rows][i], expected, 1e-12);
    }
  }
}

TEST(GraphLosses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  for (UnknownLoss loss : {UnknownLoss::kKL, UnknownLoss::kER}) {
    for (int trial = 0; trial < 20; ++trial) {
      grad::Graph g;
      const grad::NodeId x = g.input("logits", {4, 5});
      g.set_loss(g.mean(unknown_loss_rows(g, g.softmax(x), 5, loss, default_regularizer(5))));
      Tensor logits({4, 5});
      for (double& v : logits.data()) v = d(rng);
      EXPECT_LE(grad::grad_check(g, {{x, logits}}, 1e-5), 1e-4);
    }
  }
}

struct Fixture {
  scenes::Corpus corpus;
  seg::SegModel model;
  std::vector<Scene> aux;
};

const Fixture& trained() {
  static const Fixture f = [] {
    scenes::CorpusConfig cfg;
    cfg.train_scenes = 12;
    cfg.val_scenes = 0;
    cfg.test_scenes = 0;
    cfg.height = 16;
    cfg.width = 16;
    scenes::Corpus corpus = scenes::generate_corpus(cfg);
    seg::SegModel model = seg::SegModel::initialize({3, 12, 1, {16}}, 1);
    model = seg::train_supervised(model, corpus.train, seg::SgdOptions{4, 0.2, 64, 1, true}).model;
    mgu::MguConfig mc;
    mc.per_class_budget = 1;
    std::vector<Scene> aux;
    for (auto& a : mgu::build_auxiliary_set(model, corpus.train, mc).scenes) aux.push_back(std::move(a.scene));
    return Fixture{std::move(corpus), std::move(model), std::move(aux)};
  }();
  return f;
}

seg::PixelBatch mixed_batch(const Fixture& f, std::size_t count) {
  std::vector<const Scene*> ptrs{&f.corpus.train[0], &f.aux[0], &f.aux[1]};
  seg::PixelSelection sel;
  sel.synth_unknown_as_outlier = true;
  std::vector<seg::PixelRef> pool = seg::collect_pixels(ptrs, sel);
  std::mt19937_64 rng(7);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::stable_sort(pool.begin(), pool.end(), [](auto a, auto b) { return a.scene < b.scene; });
  return seg::make_batch(ptrs, pool, f.model.shape().patch_radius);
}

TEST(CombinedObjective, AlphaZeroIsCrossEntropyBitForBit) {
  const Fixture& f = trained();
  const seg::PixelBatch batch = mixed_batch(f, 300);
  ASSERT_GT(std::count(batch.outlier.begin(), batch.outlier.end(), 1), 0);
  const seg::Objective a = combined_objective(f.model, batch, LossConfig{0.0, UnknownLoss::kER, std::nullopt});
  const seg::Objective b = seg::cross_entropy_objective(f.model, batch);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.gradient, b.gradient);
}

TEST(CombinedObjective, UniformOutputsOnUnknownOnlyBatchGiveZero) {
  const seg::SegModel zero = seg::SegModel::zeros({3, 12, 1, {4}});
  const Fixture& f = trained();
  std::vector<const Scene*> ptrs{&f.aux[0]};
  seg::PixelSelection sel;
  sel.known = false;
  sel.synth_unknown_as_outlier = true;
  const std::vector<seg::PixelRef> pool = seg::collect_pixels(ptrs, sel);
  ASSERT_FALSE(pool.empty());
  const seg::PixelBatch batch = seg::make_batch(ptrs, pool, 1);
  for (UnknownLoss loss : {UnknownLoss::kKL, UnknownLoss::kER}) {
    EXPECT_NEAR(combined_objective(zero, batch, LossConfig{1.0, loss, std::nullopt}).value, 0.0, 1e-12);
  }
}

TEST(CombinedObjective, GradientIsWeightedSumOfTerms) {
  const Fixture& f = trained();
  const seg::PixelBatch batch = mixed_batch(f, 200);
  for (UnknownLoss loss : {UnknownLoss::kKL, UnknownLoss::kER}) {
    const double alpha = 0.37;
    const LossConfig cfg{alpha, loss, std::nullopt};
    const seg::Objective total = combined_objective(f.model, batch, cfg);
    const seg::Objective known = seg::cross_entropy_objective(f.model, batch);

    grad::Graph g;
    const grad::NodeId x = g.input("patches", batch.patches.shape());
    const auto wiring = f.model.attach(g, x);
    const grad::NodeId rows = unknown_loss_rows(g, g.softmax(wiring.logits), 12, loss, default_regularizer(12));
    const grad::NodeId unknown = g.masked_mean(rows, batch.outlier);
    g.set_loss(unknown);
    grad::Bindings bind{{x, batch.patches}};
    f.model.bind(bind, wiring);
    const grad::Values v = grad::forward(g, bind);
    const Tensor gu = f.model.flatten_gradient(grad::backward(g, v), wiring);

    EXPECT_NEAR(total.value, known.value + alpha * v[unknown].item(), 1e-12);
    for (std::size_t i = 0; i < gu.numel(); ++i) {
      EXPECT_NEAR(total.gradient[i], known.gradient[i] + alpha * gu[i], 1e-12);
    }
  }
}

TEST(CombinedObjective, RejectsEmptyBatch) {
  seg::PixelBatch empty;
  empty.patches = Tensor({1, 27});
  const seg::SegModel m = seg::SegModel::zeros({3, 12, 1, {4}});
  EXPECT_THROW(combined_objective(m, empty, LossConfig{}), InvalidArgument);
}

TEST(Finetune, AlphaZeroMatchesSupervisedSteps) {
  const Fixture& f = trained();
  std::vector<const Scene*> ptrs;
  for (const Scene& s : f.corpus.train) ptrs.push_back(&s);
  const seg::SgdOptions opts{2, 0.05, 128, 3, true};
  const FinetuneResult a =
      train_combined(f.model, ptrs, seg::PixelSelection{}, LossConfig{0.0, UnknownLoss::kER, std::nullopt}, opts);
  seg::SegModel b = f.model;
  const std::vector<seg::PixelRef> pool = seg::collect_pixels(ptrs, seg::PixelSelection{});
  seg::run_sgd(b, ptrs, pool, opts, seg::cross_entropy_objective);
  EXPECT_EQ(a.model.params(), b.params());
}

TEST(Finetune, ReducesUnknownLossAndSynthMsp) {
  const Fixture& f = trained();
  auto mean_synth_msp = [&](const seg::SegModel& m) {
    double total = 0.0;
    std::size_t count = 0;
    for (const Scene& s : f.aux) {
      const seg::ScoreMap msp = seg::msp_score(seg::softmax_map(seg::predict_logits(m, s.features)));
      for (std::size_t p = 0; p < s.pixel_count(); ++p) {
        if (s.roles[p] != PixelRole::kSynthUnknown) continue;
        total += msp.values[p];
        ++count;
      }
    }
    return total / static_cast<double>(count);
  };
  const seg::SgdOptions opts{3, 0.05, 128, 1, true};
  const FinetuneResult r = finetune(f.model, f.corpus.train, f.aux, LossConfig{}, opts);
  EXPECT_EQ(r.report.epochs, 3u);
  EXPECT_EQ(r.report.mean_known_loss.size(), 3u);
  EXPECT_EQ(r.report.mean_unknown_loss.size(), 3u);
  EXPECT_LT(r.report.mean_unknown_loss.back(), r.report.initial_unknown_loss);
  EXPECT_LT(mean_synth_msp(r.model), mean_synth_msp(f.model));

  const FinetuneResult again = finetune(f.model, f.corpus.train, f.aux, LossConfig{}, opts);
  EXPECT_EQ(again.model, r.model);
}

TEST(Finetune, RejectsEmptyAuxiliarySet) {
  const Fixture& f = trained();
  EXPECT_THROW(finetune(f.model, f.corpus.train, {}, LossConfig{}, seg::SgdOptions{}), InvalidArgument);
  EXPECT_THROW(finetune(f.model, f.corpus.train, f.corpus.train, LossConfig{}, seg::SgdOptions{}), InvalidArgument);
}

TEST(ReportCsv, Format) {
  FinetuneReport r;
  r.initial_known_loss = 1.0;
  r.initial_unknown_loss = 2.0;
  r.mean_known_loss = {0.5};
  r.mean_unknown_loss = {1.5};
  r.epochs = 1;
  EXPECT_EQ(report_csv(r), "epoch,mean_Lk,mean_unknown_loss\n0,1,2\n1,0.5,1.5\n");
}

}  // namespace
}  // namespace asl::aaft
