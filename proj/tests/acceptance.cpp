// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hood/checkpoint.hpp"
#include "hood/intervention.hpp"
#include "hood/optim.hpp"
#include "hood/ova.hpp"
#include "hood/serialize.hpp"
#include "hood/tasks.hpp"
#include "test_util.hpp"

using namespace hood;
using namespace hood::testing;

namespace {

// Thresholds.
constexpr double kIdentityTol = 1e-6;
constexpr double kGradTol = 1e-4;
constexpr double kKlSigmas = 3.0;
constexpr double kAurocTol = 1e-12;
constexpr double kMatchedMin = 0.90;
constexpr double kCrossedSlack = 0.15;
constexpr double kSeparationGap = 0.3;
constexpr double kAurocMin = 0.85;
constexpr int kSeeds = 5;
constexpr int kSeedWins = 4;
constexpr double kSuiteBudgetSeconds = 600.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o) {
  std::printf("%s %2d %-28s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
  failures += o.pass ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome elbo_identity() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const HoodModel<double> m = small_model(1000 + t, 2 + rng.below(3), 2 + rng.below(4));
    const std::size_t n = 1 + rng.below(4);
    const ElboTerms e =
        elbo_tilde(uniform_matrix(rng, n, 6), random_labels(rng, n, m.config().num_classes),
                   random_labels(rng, n, m.config().num_domains), m, normal_matrix(rng, n, 3),
                   normal_matrix(rng, n, 3));
    worst = std::max(worst, std::abs(e.tilde_elbo() - (e.elbo() - e.loglik_d_given_c - e.loglik_y_given_s)));
  }
  const double secs = seconds_since(t0);
  return {worst <= kIdentityTol && secs < 10.0, fmt("max |diff| %.2e over 1000 cases, %.2fs", worst, secs)};
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  Rng rng(102);
  std::map<std::string, double> worst;
  std::size_t kinks = 0;
  auto check = [&](double& w, Tensor<double>& t, const Tensor<double>& g, const std::function<double()>& f) {
    const FdResult r = fd_worst_piecewise(t, g, f, kGradTol);
    w = std::max(w, r.worst);
    kinks += r.kinks;
  };

  for (int t = 0; t < 100; ++t) {
    HoodModel<double> m = small_model(2000 + t);
    const std::size_t n = 3;
    const Tensor<double> x = uniform_matrix(rng, n, 6);
    const auto y = random_labels(rng, n, 3), d = random_labels(rng, n, 3);
    const Tensor<double> nc = normal_matrix(rng, n, 3), ns = normal_matrix(rng, n, 3);
    const ObjectiveOptions literal{true, 1.0, false};
    auto loss = [&](ParamSet<double>* grads) {
      Graph<double> g;
      BoundModel<double> b(g, m, true);
      Var<double> l = b.negative_elbo_loss(b.elbo(b.input(x), y, d, nc, ns), {1, 1, 1}, literal);
      if (grads) {
        g.backprop(l);
        *grads = b.grads();
      }
      return l.value().item();
    };
    ParamSet<double> grads;
    loss(&grads);
    double& w = worst["tilde-elbo"];
    for (auto& [name, tensor] : m.params()) {
      if (name.rfind("input.", 0) == 0) continue;
      check(w, tensor, grads.at(name), [&] { return loss(nullptr); });
    }
  }

  const std::pair<InterventionMode, const char*> modes[] = {
      {InterventionMode::positive, "L_pos"},
      {InterventionMode::positive_targeted, "L_pos'"},
      {InterventionMode::negative, "L_neg"}};
  for (const auto& [mode, name] : modes) {
    double& w = worst[name];
    for (int t = 0; t < 100; ++t) {
      const HoodModel<double> m = small_model(3000 + t);
      const Tensor<double> x = uniform_matrix(rng, 2, 6);
      Tensor<double> e = uniform_matrix(rng, 2, 6, -0.05, 0.05);
      const auto labels = random_labels(rng, 2, 3);
      const auto [obj, grad] = intervention_value_and_grad(m, x, e, labels, mode);
      check(w, e, grad, [&] { return detail::objective_sum(m, x, e, labels, mode); });
    }
  }

  double& w = worst["ova"];
  for (int t = 0; t < 100; ++t) {
    Tensor<double> logits = uniform_matrix(rng, 3, 8, -3, 3);
    const auto y = random_labels(rng, 3, 4);
    const std::vector<bool> unk{rng.below(2) == 1, rng.below(2) == 1, rng.below(2) == 1};
    auto f = [&] {
      Graph<double> g;
      return ova_loss_graph<double>(g.constant(logits), y, unk).value().item();
    };
    Graph<double> g;
    Var<double> v = g.parameter(logits);
    g.backprop(ova_loss_graph<double>(v, y, unk));
    check(w, logits, g.grad(v), f);
  }

  bool ok = true;
  std::string detail;
  for (const auto& [name, v] : worst) {
    ok = ok && v <= kGradTol;
    detail += fmt("%s %.1e  ", name.c_str(), v);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 60.0;
  return {ok, detail + fmt("(%zu kink coordinates, %.1fs)", kinks, secs)};
}

Outcome kl_oracle() {
  Rng rng(103);
  int bad = 0;
  double worst_z = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> mu(3), sigma(3);
    for (double& v : mu) v = rng.uniform(-1.5, 1.5);
    for (double& v : sigma) v = rng.uniform(0.3, 2.0);
    const int n = 100'000;
    double sum = 0.0, sq = 0.0;
    for (int s = 0; s < n; ++s) {
      double lr = 0.0;
      for (std::size_t j = 0; j < mu.size(); ++j) {
        const double eps = rng.normal();
        const double z = mu[j] + sigma[j] * eps;
        lr += -std::log(sigma[j]) - 0.5 * eps * eps + 0.5 * z * z;
      }
      sum += lr;
      sq += lr * lr;
    }
    const double mean = sum / n, se = std::sqrt((sq / n - mean * mean) / n);
    const double z = std::abs(mean - kl_to_standard_normal<double>(mu, sigma)) / se;
    worst_z = std::max(worst_z, z);
    bad += z > kKlSigmas;
  }
  return {bad == 0, fmt("worst deviation %.2f standard errors over 50 posteriors", worst_z)};
}

Outcome pgd_budget() {
  Rng rng(104);
  double worst_excess = -1.0;
  int rising = 0;
  for (int t = 0; t < 1000; ++t) {
    const HoodModel<double> m = small_model(4000 + t);
    const std::size_t n = 1 + rng.below(3);
    const Tensor<double> x = uniform_matrix(rng, n, 6);
    InterventionConfig cfg;
    cfg.epsilon = rng.uniform(0.0, 0.1);
    cfg.steps = 1 + static_cast<int>(rng.below(15));
    cfg.mode = static_cast<InterventionMode>(rng.below(3));
    cfg.target_domain = rng.below(3);
    PgdTrace trace;
    const auto out = pgd_augment(x, random_labels(rng, n, 3), random_labels(rng, n, 3), cfg, m, &trace);
    for (std::size_t i = 0; i < n; ++i) {
      double linf = 0.0;
      for (std::size_t j = 0; j < 6; ++j) linf = std::max(linf, std::abs(out[i].x_aug[j] - x(i, j)));
      worst_excess = std::max(worst_excess, linf - cfg.epsilon);
      rising += trace.final_objective[i] > trace.initial_objective[i];
    }
  }
  return {worst_excess <= 1e-7 && rising == 0,
          fmt("max (||e||_inf - eps) %.2e, %d runs with a rising objective", worst_excess, rising)};
}

Outcome auroc_oracle() {
  Rng rng(105);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    std::vector<double> id(1 + rng.below(30)), ood(1 + rng.below(30));
    const bool ties = t % 2 == 0;
    for (auto* v : {&id, &ood})
      for (double& s : *v) s = ties ? static_cast<double>(rng.below(6)) : rng.uniform(0, 1);
    double wins = 0;
    for (double o : ood)
      for (double i : id) wins += o > i ? 1.0 : (o == i ? 0.5 : 0.0);
    wins /= static_cast<double>(id.size() * ood.size());
    worst = std::max(worst, std::abs(auroc(id, ood) - wins));
  }
  return {worst <= kAurocTol, fmt("max |rank - pairwise| %.1e over 500 lists", worst)};
}

// Trained runs shared by the behavioural criteria.
struct Runs {
  std::vector<TaskRun> full, no_malign;
  std::vector<EvalReport> ssl_full, ssl_no_reg, ssl_no_benign;
  std::vector<std::vector<double>> sweep;  // [seed][pool size - 2]
};

FactoredDataset benchmark(TaskKind task, std::uint64_t seed) {
  FactorSpec spec = default_factor_spec(task);
  if (task == TaskKind::ood_detection) spec.n_unlabeled = 0;
  return generate_synthetic(spec, seed);
}

TrainConfig config(TaskKind task, std::uint64_t seed) {
  TrainConfig c;
  c.task = task;
  c.seed = seed;
  return c;
}

Outcome disentanglement(const Runs& r) {
  CrossPredictionGrid mean;
  for (const TaskRun& run : r.full) {
    const CrossPredictionGrid& g = *run.report.cross_prediction;
    mean.content_to_class += g.content_to_class / kSeeds;
    mean.content_to_domain += g.content_to_domain / kSeeds;
    mean.style_to_class += g.style_to_class / kSeeds;
    mean.style_to_domain += g.style_to_domain / kSeeds;
    mean.class_chance = g.class_chance;
    mean.domain_chance = g.domain_chance;
  }
  const bool ok = mean.content_to_class >= kMatchedMin && mean.style_to_domain >= kMatchedMin &&
                  mean.content_to_domain <= mean.domain_chance + kCrossedSlack &&
                  mean.style_to_class <= mean.class_chance + kCrossedSlack;
  return {ok, fmt("c->y %.3f s->d %.3f | c->d %.3f (<= %.3f) s->y %.3f (<= %.3f)", mean.content_to_class,
                  mean.style_to_domain, mean.content_to_domain, mean.domain_chance + kCrossedSlack,
                  mean.style_to_class, mean.class_chance + kCrossedSlack)};
}

Outcome score_separation_check(const Runs& r) {
  int ok = 0;
  std::string detail;
  for (const TaskRun& run : r.full) {
    const ScoreSeparation s = score_separation(run.train.model, run.train.pools);
    ok += s.benign_mean < 0.5 && s.malign_mean > 0.5 && s.gap() >= kSeparationGap;
    detail += fmt("%.2f/%.2f ", s.benign_mean, s.malign_mean);
  }
  return {ok == kSeeds, fmt("%d/%d seeds; benign/malign: ", ok, kSeeds) + detail};
}

Outcome detection_quality(const Runs& r) {
  double mean = 0.0;
  int wins = 0;
  std::string detail;
  for (int s = 0; s < kSeeds; ++s) {
    const double full = *r.full[s].report.auroc, ablated = *r.no_malign[s].report.auroc;
    mean += full / kSeeds;
    wins += full >= ablated;
    detail += fmt("%.3f/%.3f ", full, ablated);
  }
  return {mean >= kAurocMin && wins >= kSeedWins,
          fmt("mean AUROC %.3f, beats no-malign in %d/%d; full/ablated: ", mean, wins, kSeeds) + detail};
}

Outcome ablation_directions(const Runs& r) {
  int reg_wins = 0, benign_wins = 0;
  std::string detail;
  for (int s = 0; s < kSeeds; ++s) {
    reg_wins += r.ssl_no_reg[s].corrupted_accuracy < r.ssl_full[s].corrupted_accuracy;
    benign_wins += r.ssl_no_benign[s].closed_set_accuracy < r.ssl_full[s].closed_set_accuracy;
    detail += fmt("[%.3f %.3f | %.3f %.3f] ", r.ssl_full[s].corrupted_accuracy, r.ssl_no_reg[s].corrupted_accuracy,
                  r.ssl_full[s].closed_set_accuracy, r.ssl_no_benign[s].closed_set_accuracy);
  }
  return {reg_wins >= kSeedWins && benign_wins >= kSeedWins,
          fmt("no-regularizer lowers corrupted acc %d/%d, no-benign lowers clean acc %d/%d; ", reg_wins, kSeeds,
              benign_wins, kSeeds) +
              detail};
}

Outcome sweep_shape(const Runs& r) {
  int interior = 0;
  std::string detail;
  for (const auto& row : r.sweep) {
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    interior += best != 0 && best != static_cast<long>(row.size()) - 1;
    detail += fmt("argmax=%ld ", best + 2);
  }
  return {interior >= kSeedWins, fmt("interior optimum in %d/%d seeds; ", interior, kSeeds) + detail};
}

Outcome reproducibility(const Runs& r, Clock::time_point suite_start) {
  const FactoredDataset ds = benchmark(TaskKind::ood_detection, 1);
  const TaskRun again = run_task(config(TaskKind::ood_detection, 1), ds);
  const TaskRun& first = r.full[0];
  const bool same_ckpt = encode_checkpoint(again.train.model) == encode_checkpoint(first.train.model);
  const bool same_report = to_json(again.report).dump() == to_json(first.report).dump();
  const double secs = seconds_since(suite_start);
  return {same_ckpt && same_report && secs < kSuiteBudgetSeconds,
          fmt("checkpoint %s, report %s, acceptance wall time %.0fs (budget %.0fs)",
              same_ckpt ? "identical" : "DIFFERS", same_report ? "identical" : "DIFFERS", secs,
              kSuiteBudgetSeconds)};
}

}  // namespace

int main() {
  const auto start = Clock::now();
  report(1, "elbo identity", elbo_identity());
  report(2, "gradient oracle", gradient_oracle());
  report(3, "kl oracle", kl_oracle());
  report(4, "pgd budget", pgd_budget());
  report(5, "auroc oracle", auroc_oracle());

  Runs r;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const auto t0 = Clock::now();
    const FactoredDataset ood = benchmark(TaskKind::ood_detection, seed);
    TrainConfig c = config(TaskKind::ood_detection, seed);
    r.full.push_back(run_task(c, ood));
    c.use_malign = false;
    r.no_malign.push_back(run_task(c, ood));

    const FactoredDataset ssl = benchmark(TaskKind::open_set_ssl, seed);
    TrainConfig s = config(TaskKind::open_set_ssl, seed);
    r.ssl_full.push_back(run_task(s, ssl).report);
    s.use_regularizers = false;
    r.ssl_no_reg.push_back(run_task(s, ssl).report);
    s = config(TaskKind::open_set_ssl, seed);
    s.use_benign = false;
    r.ssl_no_benign.push_back(run_task(s, ssl).report);

    // The default pool size is already covered by the full run.
    std::vector<double> row;
    for (const SweepRow& sr : run_augmentation_sweep(config(TaskKind::ood_detection, seed), ood, {2, 3, 5, 6}))
      row.push_back(*sr.report.auroc);
    row.insert(row.begin() + 2, *r.full.back().report.auroc);
    r.sweep.push_back(row);
    std::printf("     seed %llu trained (%.0fs)\n", static_cast<unsigned long long>(seed), seconds_since(t0));
    std::fflush(stdout);
  }

  report(6, "disentanglement", disentanglement(r));
  report(7, "ood-score separation", score_separation_check(r));
  report(8, "detection quality", detection_quality(r));
  report(9, "ablation directions", ablation_directions(r));
  report(10, "augmentation sweep", sweep_shape(r));
  report(11, "reproducibility", reproducibility(r, start));
  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
