#include <gtest/gtest.h>

#include <cmath>

#include "hood/intervention.hpp"
#include "hood/tasks.hpp"
#include "test_util.hpp"

using namespace hood;
using namespace hood::testing;

namespace {

GaussianPosterior<double> point(std::vector<double> mean) {
  const std::size_t n = mean.size();
  return {Tensor<double>(Shape{1, n}, std::move(mean)), Tensor<double>(Shape{1, n}, 1.0)};
}

double linf(const std::vector<float>& a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(static_cast<double>(a[j]) - b[j]));
  return m;
}

// A small trained model shared by the behavioural tests.
const TrainResult& toy() {
  static const TrainResult r = [] {
    FactorSpec spec;
    spec.n_unlabeled = 0;
    spec.n_test = 200;
    const FactoredDataset ds = generate_synthetic(spec, 3);
    TrainConfig cfg;
    cfg.max_iter = 400;
    cfg.seed = 3;
    return train_hood(cfg, ds);
  }();
  return r;
}

Tensor<float> toy_inputs(std::size_t n) {
  const auto& r = toy();
  Tensor<float> x = Tensor<float>::matrix(n, r.pools.labeled_x.cols());
  for (std::size_t i = 0; i < n; ++i) {
    auto src = r.pools.labeled_x.row(i);
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

}  // namespace

TEST(ContentDistance, EqualMeansGiveZero) {
  EXPECT_EQ(content_distance(point({1, 2, 3}), point({1, 2, 3}))[0], 0.0);
}

TEST(ContentDistance, UnitVectorOffsetGivesOne) {
  EXPECT_DOUBLE_EQ(content_distance(point({0, 0, 0}), point({0, 1, 0}))[0], 1.0);
}

TEST(ContentDistance, IsSymmetricAndRejectsMismatch) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    auto a = point({rng.normal(), rng.normal()}), b = point({rng.normal(), rng.normal()});
    EXPECT_EQ(content_distance(a, b)[0], content_distance(b, a)[0]);
  }
  EXPECT_THROW(content_distance(point({0, 0}), point({0, 0, 0})), std::invalid_argument);
}

TEST(ContentDistance, RelaxedTriangleInequality) {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> va(4), vb(4), vc(4);
    for (auto* v : {&va, &vb, &vc})
      for (double& x : *v) x = rng.uniform(-2, 2);
    const auto a = point(va), b = point(vb), c = point(vc);
    EXPECT_LE(content_distance(a, c)[0],
              2.0 * (content_distance(a, b)[0] + content_distance(b, c)[0]) + 1e-12);
  }
}

TEST(Objectives, ZeroPerturbationLeavesOnlyTheCrossEntropy) {
  Rng rng(3);
  const HoodModel<double> m = small_model(3);
  const Tensor<double> x = uniform_matrix(rng, 1, 6), e = Tensor<double>::matrix(1, 6);
  const Tensor<double> s = encode_style(x, m).mean, c = encode_content(x, m).mean;
  const double logp_d = classify_domain(s, m)(0, 1);
  const double logp_y = classify_class(c, m)(0, 2);
  EXPECT_NEAR(loss_pos(x, e, {1}, m), logp_d, 1e-12);
  EXPECT_NEAR(loss_pos_targeted(x, e, {1}, m), -logp_d, 1e-12);
  EXPECT_NEAR(loss_neg(x, e, {2}, m), logp_y, 1e-12);
}

TEST(Objectives, TargetedAtPredictedDomainIsItsNegativeLogProbability) {
  Rng rng(4);
  const HoodModel<double> m = small_model(4);
  const Tensor<double> x = uniform_matrix(rng, 1, 6);
  const Tensor<double> lp = classify_domain(encode_style(x, m).mean, m);
  auto row = lp.row(0);
  const std::size_t pred = std::max_element(row.begin(), row.end()) - row.begin();
  EXPECT_NEAR(loss_pos_targeted(x, Tensor<double>::matrix(1, 6), {pred}, m), -row[pred], 1e-12);
}

TEST(Objectives, LabelsOutOfRangeAreRejected) {
  Rng rng(5);
  const HoodModel<double> m = small_model(5, 3, 4);
  const Tensor<double> x = uniform_matrix(rng, 1, 6), e = Tensor<double>::matrix(1, 6);
  EXPECT_THROW(loss_pos(x, e, {4}, m), std::out_of_range);
  EXPECT_THROW(loss_pos_targeted(x, e, {4}, m), std::out_of_range);
  EXPECT_THROW(loss_neg(x, e, {3}, m), std::out_of_range);
}

TEST(Objectives, PerturbationGradientsMatchFiniteDifferences) {
  Rng rng(6);
  for (InterventionMode mode :
       {InterventionMode::positive, InterventionMode::positive_targeted, InterventionMode::negative}) {
    double worst = 0.0;
    for (int t = 0; t < 30; ++t) {
      const HoodModel<double> m = small_model(50 + t);
      const Tensor<double> x = uniform_matrix(rng, 2, 6);
      Tensor<double> e = uniform_matrix(rng, 2, 6, -0.05, 0.05);
      const auto labels = random_labels(rng, 2, 3);
      const auto [obj, grad] = intervention_value_and_grad(m, x, e, labels, mode);
      worst = std::max(worst, fd_worst(e, grad, [&] { return detail::objective_sum(m, x, e, labels, mode); }));
    }
    EXPECT_LE(worst, 1e-4) << static_cast<int>(mode);
  }
}

TEST(Pgd, ZeroBudgetReturnsInputUnchanged) {
  Rng rng(7);
  const HoodModel<double> m = small_model(7);
  const Tensor<double> x = uniform_matrix(rng, 3, 6);
  InterventionConfig cfg;
  cfg.epsilon = 0.0;
  const auto out = pgd_augment(x, {0, 1, 2}, {0, 1, 2}, cfg, m);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(out[i].x_aug[j], static_cast<float>(x(i, j)));
}

TEST(Pgd, BudgetAndMonotoneObjectiveOnRandomRuns) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const HoodModel<double> m = small_model(300 + t);
    const std::size_t n = 1 + rng.below(3);
    const Tensor<double> x = uniform_matrix(rng, n, 6);
    InterventionConfig cfg;
    cfg.epsilon = rng.uniform(0.0, 0.1);
    cfg.steps = 1 + static_cast<int>(rng.below(15));
    cfg.norm = rng.below(2) ? PerturbNorm::l2 : PerturbNorm::linf;
    cfg.mode = static_cast<InterventionMode>(rng.below(3));
    cfg.target_domain = rng.below(3);
    PgdTrace trace;
    const auto out = pgd_augment(x, random_labels(rng, n, 3), random_labels(rng, n, 3), cfg, m, &trace);
    for (std::size_t i = 0; i < n; ++i) {
      if (cfg.norm == PerturbNorm::linf) {
        EXPECT_LE(linf(out[i].x_aug, x.row(i)), cfg.epsilon + 1e-7);
      } else {
        double sq = 0.0;
        for (std::size_t j = 0; j < 6; ++j) sq += std::pow(out[i].x_aug[j] - x(i, j), 2);
        EXPECT_LE(std::sqrt(sq), cfg.epsilon + 1e-6);
      }
      for (float v : out[i].x_aug) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
      EXPECT_LE(trace.final_objective[i], trace.initial_objective[i]);
    }
  }
}

TEST(Pgd, SamplesCarryModeBookkeeping) {
  Rng rng(9);
  const HoodModel<double> m = small_model(9);
  const Tensor<double> x = uniform_matrix(rng, 2, 6);
  InterventionConfig cfg;
  cfg.mode = InterventionMode::negative;
  auto out = pgd_augment(x, {2, 1}, {0, 2}, cfg, m, nullptr, 10);
  EXPECT_EQ(out[1].origin_index, 11u);
  EXPECT_EQ(out[1].label, 1u);
  EXPECT_EQ(out[1].domain, 2u);
  EXPECT_TRUE(out[1].is_unknown());
  cfg.mode = InterventionMode::positive_targeted;
  cfg.target_domain = 1;
  out = pgd_augment(x, {2, 1}, {0, 2}, cfg, m);
  EXPECT_EQ(out[0].domain, 1u);
  EXPECT_EQ(out[0].label, 2u);
  EXPECT_EQ(out[0].kind, SampleKind::benign);
}

TEST(Pgd, InvalidConfigIsRejected) {
  InterventionConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.epsilon = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.step_size = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Pgd, IsDeterministic) {
  Rng rng(10);
  const HoodModel<double> m = small_model(10);
  const Tensor<double> x = uniform_matrix(rng, 4, 6);
  InterventionConfig cfg;
  const auto a = pgd_augment(x, {0, 1, 2, 0}, {1, 1, 0, 2}, cfg, m);
  const auto b = pgd_augment(x, {0, 1, 2, 0}, {1, 1, 0, 2}, cfg, m);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].x_aug, b[i].x_aug);
}

TEST(PgdTrained, HalfBudgetCannotDoBetter) {
  const HoodModel<float>& m = toy().model;
  const Tensor<float> x = toy_inputs(40);
  std::vector<std::size_t> y(toy().pools.labeled_y.begin(), toy().pools.labeled_y.begin() + 40);
  std::vector<std::size_t> d(40, 0);
  for (InterventionMode mode : {InterventionMode::positive, InterventionMode::negative}) {
    InterventionConfig big, small;
    big.mode = small.mode = mode;
    small.epsilon = big.epsilon / 2;
    // Same absolute step, so the small-ball iterates are feasible for the large ball.
    small.step_size = big.effective_step();
    PgdTrace tb, ts;
    pgd_augment(x, y, d, big, m, &tb);
    pgd_augment(x, y, d, small, m, &ts);
    double sum_b = 0, sum_s = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      sum_b += tb.final_objective[i];
      sum_s += ts.final_objective[i];
    }
    EXPECT_LE(sum_b, sum_s + 1e-6);
  }
}

TEST(PgdTrained, FinalObjectiveNeverExceedsInitialAcrossSeeds) {
  const HoodModel<float>& m = toy().model;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t row = rng.below(toy().pools.labeled_x.rows());
    Tensor<float> x = Tensor<float>::matrix(1, m.config().input_dim);
    auto src = toy().pools.labeled_x.row(row);
    std::copy(src.begin(), src.end(), x.row(0).begin());
    InterventionConfig cfg;
    cfg.mode = static_cast<InterventionMode>(rng.below(3));
    cfg.target_domain = rng.below(m.config().num_domains);
    PgdTrace trace;
    pgd_augment(x, {toy().pools.labeled_y[row]}, {rng.below(m.config().num_domains)}, cfg, m, &trace);
    EXPECT_LE(trace.final_objective[0], trace.initial_objective[0]);
  }
}

TEST(PgdTrained, TargetedRaisesTargetDomainProbability) {
  const HoodModel<float>& m = toy().model;
  const Tensor<float> x = toy_inputs(30);
  InterventionConfig cfg;
  cfg.mode = InterventionMode::positive_targeted;
  cfg.target_domain = 3;
  const std::vector<std::size_t> y(30, 0), d(30, 0);
  const auto out = pgd_augment(x, y, d, cfg, m);
  const Tensor<float> before = classify_domain(encode_style(x, m).mean, m);
  Tensor<float> xa = Tensor<float>::matrix(30, x.cols());
  for (std::size_t i = 0; i < 30; ++i) std::copy(out[i].x_aug.begin(), out[i].x_aug.end(), xa.row(i).begin());
  const Tensor<float> after = classify_domain(encode_style(xa, m).mean, m);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_GE(after(i, 3), before(i, 3) - 1e-6f);
}

TEST(PgdTrained, NegativeLowersTrueClassProbability) {
  const HoodModel<float>& m = toy().model;
  const Tensor<float> x = toy_inputs(30);
  std::vector<std::size_t> y(toy().pools.labeled_y.begin(), toy().pools.labeled_y.begin() + 30);
  InterventionConfig cfg;
  cfg.mode = InterventionMode::negative;
  const auto out = pgd_augment(x, y, std::vector<std::size_t>(30, 0), cfg, m);
  const Tensor<float> before = classify_class(encode_content(x, m).mean, m);
  Tensor<float> xa = Tensor<float>::matrix(30, x.cols());
  for (std::size_t i = 0; i < 30; ++i) std::copy(out[i].x_aug.begin(), out[i].x_aug.end(), xa.row(i).begin());
  const Tensor<float> after = classify_class(encode_content(xa, m).mean, m);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_LE(after(i, y[i]), before(i, y[i]) + 1e-6f);
}

TEST(PgdTrained, ModesMoveTheIntendedLatent) {
  const HoodModel<float>& m = toy().model;
  const Tensor<float> x = toy_inputs(100);
  std::vector<std::size_t> y(toy().pools.labeled_y.begin(), toy().pools.labeled_y.begin() + 100);
  std::vector<std::size_t> d(100, 0);
  auto drift = [&](InterventionMode mode) {
    InterventionConfig cfg;
    cfg.mode = mode;
    const auto out = pgd_augment(x, y, d, cfg, m);
    Tensor<float> xa = Tensor<float>::matrix(100, x.cols());
    for (std::size_t i = 0; i < 100; ++i) std::copy(out[i].x_aug.begin(), out[i].x_aug.end(), xa.row(i).begin());
    auto mean_of = [](const std::vector<float>& v) {
      double s = 0;
      for (float f : v) s += f;
      return s / v.size();
    };
    return std::make_pair(mean_of(content_distance(encode_content(x, m), encode_content(xa, m))),
                          mean_of(content_distance(encode_style(x, m), encode_style(xa, m))));
  };
  const auto [benign_c, benign_s] = drift(InterventionMode::positive);
  const auto [malign_c, malign_s] = drift(InterventionMode::negative);
  EXPECT_LT(benign_c, malign_c);
  EXPECT_LT(malign_s, benign_s);
}
