#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/augment.hpp"
#include "hood/data.hpp"
#include "hood/intervention.hpp"
#include "hood/model.hpp"
#include "hood/ova.hpp"
#include "hood/trainer.hpp"

namespace hood {

// Probability that a random OOD score exceeds a random ID score, ties
// counting one half. Mann-Whitney U with average ranks, O(n log n).
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw std::invalid_argument("auroc: both score lists must be non-empty");
  }
  struct Entry {
    double score;
    bool ood;
  };
  std::vector<Entry> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) all.push_back({s, false});
  for (double s : ood_scores) all.push_back({s, true});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });
  double rank_sum_ood = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].ood) rank_sum_ood += avg_rank;
    i = j;
  }
  const double n_ood = static_cast<double>(ood_scores.size());
  const double n_id = static_cast<double>(id_scores.size());
  const double u = rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0;
  return u / (n_ood * n_id);
}

inline double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
  return auroc(std::span<const double>(id_scores), std::span<const double>(ood_scores));
}

struct TaskSpec {
  TaskKind kind = TaskKind::ood_detection;
  const FactoredDataset* dataset = nullptr;
  std::size_t pool_size = kDefaultPoolSize;
  std::uint64_t seed = 0;  // corruption noise

  const FactoredDataset& data() const {
    if (!dataset) throw std::invalid_argument("task: no dataset attached");
    return *dataset;
  }
};

// Factor presets for each deployment. Domain adaptation draws labeled data
// from style 0 and everything else from style 1.
inline FactorSpec default_factor_spec(TaskKind kind) {
  FactorSpec s;
  if (kind == TaskKind::open_set_da) {
    s.source_styles = {0};
    s.target_styles = {1};
  }
  return s;
}

struct CrossPredictionGrid {
  double content_to_class = 0;
  double content_to_domain = 0;
  double style_to_class = 0;
  double style_to_domain = 0;
  double class_chance = 0;
  double domain_chance = 0;
};

struct InstanceRecord {
  std::size_t id = 0;
  std::size_t true_class = 0;
  std::size_t predicted_class = 0;
  double ova_score = 0;
  bool is_ood = false;
  bool known = true;
};

struct ClassRow {
  std::size_t label = 0;
  bool known = true;
  std::size_t count = 0;
  double accuracy = 0;  // known classes: closed-set accuracy; unknown: rejection rate
  double mean_score = 0;
};

struct Confusion {
  std::size_t id_as_id = 0, id_as_ood = 0, ood_as_id = 0, ood_as_ood = 0;
};

struct EvalReport {
  TaskKind task = TaskKind::ood_detection;
  std::optional<double> auroc;
  double closed_set_accuracy = 0;
  double corrupted_accuracy = 0;
  double unknown_recall = 0;
  double known_accuracy = 0;  // correct class and not rejected
  double harmonic_mean = 0;
  Confusion confusion;
  std::vector<ClassRow> per_class;
  std::optional<CrossPredictionGrid> cross_prediction;
  std::vector<InstanceRecord> instances;
};

namespace detail {

template <typename F>
double accuracy_of(std::size_t n, F correct) {
  if (n == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) hit += correct(i) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(n);
}

inline std::vector<std::size_t> argmax_rows(const Tensor<float>& logp) {
  std::vector<std::size_t> out(logp.rows());
  for (std::size_t i = 0; i < logp.rows(); ++i) {
    auto r = logp.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline std::vector<std::size_t> known_test_rows(const FactoredDataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t r : ds.indices(Split::test))
    if (ds.is_known(ds.rows[r].label)) out.push_back(r);
  return out;
}

}  // namespace detail

// Closed-set accuracy on known test rows averaged over every corruption kind
// and severities 1..5.
inline double corrupted_accuracy(const HoodModel<float>& model, const FactoredDataset& ds,
                                 std::uint64_t seed = 0) {
  const auto rows = detail::known_test_rows(ds);
  if (rows.empty()) return 0.0;
  double total = 0.0;
  int cells = 0;
  for (Corruption kind : kCorruptions) {
    for (int sev = 1; sev <= kMaxSeverity; ++sev) {
      Tensor<float> x = Tensor<float>::matrix(rows.size(), ds.dim);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto c = corrupt(ds.rows[rows[i]].x, kind, sev, seed + 1000003ULL * rows[i]);
        std::copy(c.begin(), c.end(), x.row(i).begin());
      }
      const auto enc = encode_content(x, model);
      const auto pred = detail::argmax_rows(classify_class(enc.mean, model));
      total += detail::accuracy_of(rows.size(), [&](std::size_t i) {
        return pred[i] == ds.rows[rows[i]].label;
      });
      ++cells;
    }
  }
  return total / cells;
}

// Four-cell probe: each latent fed to each classifier.
using LatentClassifier = std::function<std::vector<std::size_t>(const Tensor<float>&)>;

inline CrossPredictionGrid cross_prediction_grid(const Tensor<float>& content,
                                                 const Tensor<float>& style,
                                                 const std::vector<std::size_t>& y,
                                                 const std::vector<std::size_t>& d,
                                                 const LatentClassifier& class_of,
                                                 const LatentClassifier& domain_of,
                                                 std::size_t num_classes, std::size_t num_domains) {
  const auto cc = class_of(content), cd = domain_of(content);
  const auto sc = class_of(style), sd = domain_of(style);
  const std::size_t n = y.size();
  CrossPredictionGrid g;
  g.content_to_class = detail::accuracy_of(n, [&](std::size_t i) { return cc[i] == y[i]; });
  g.content_to_domain = detail::accuracy_of(n, [&](std::size_t i) { return cd[i] == d[i]; });
  g.style_to_class = detail::accuracy_of(n, [&](std::size_t i) { return sc[i] == y[i]; });
  g.style_to_domain = detail::accuracy_of(n, [&](std::size_t i) { return sd[i] == d[i]; });
  g.class_chance = 1.0 / static_cast<double>(num_classes);
  g.domain_chance = 1.0 / static_cast<double>(num_domains);
  return g;
}

// Every known test row under every style-pool view, labelled (class, view id).
struct StyledSet {
  Tensor<float> x;
  std::vector<std::size_t> y, d;
};

inline StyledSet styled_known_test(const FactoredDataset& ds, std::size_t pool_size,
                                   std::size_t max_rows = 300) {
  auto rows = detail::known_test_rows(ds);
  if (rows.size() > max_rows) rows.resize(max_rows);
  StyledSet s;
  s.x = Tensor<float>::matrix(rows.size() * (pool_size + 1), ds.dim);
  std::size_t k = 0;
  for (std::size_t r : rows) {
    for (std::size_t a = 0; a <= pool_size; ++a, ++k) {
      auto v = apply_style_pool(ds.rows[r].x, a, pool_size);
      std::copy(v.x.begin(), v.x.end(), s.x.row(k).begin());
      s.y.push_back(ds.rows[r].label);
      s.d.push_back(v.domain);
    }
  }
  return s;
}

// Class and domain heads applied to both posterior means.
inline CrossPredictionGrid cross_prediction(const HoodModel<float>& model, const FactoredDataset& ds,
                                            std::size_t pool_size) {
  const StyledSet s = styled_known_test(ds, pool_size);
  const auto c = encode_content(s.x, model);
  const auto st = encode_style(s.x, model);
  LatentClassifier cls = [&](const Tensor<float>& z) {
    return detail::argmax_rows(classify_class(z, model));
  };
  LatentClassifier dom = [&](const Tensor<float>& z) {
    return detail::argmax_rows(classify_domain(z, model));
  };
  return cross_prediction_grid(c.mean, st.mean, s.y, s.d, cls, dom, model.config().num_classes,
                               pool_size + 1);
}

// Test-split evaluation shared by the three deployments.
inline EvalReport evaluate(const HoodModel<float>& model, const TaskSpec& spec) {
  const FactoredDataset& ds = spec.data();
  EvalReport rep;
  rep.task = spec.kind;
  const auto rows = ds.indices(Split::test);
  if (rows.empty()) throw std::invalid_argument("evaluate: empty test split");
  const auto preds = ova_predict(ds.features(rows), model);

  std::vector<double> id_scores, ood_scores;
  std::size_t known_n = 0, known_hit = 0, known_open_hit = 0, unk_n = 0, unk_hit = 0;
  std::vector<ClassRow> per(ds.num_classes);
  for (std::size_t c = 0; c < per.size(); ++c) {
    per[c].label = c;
    per[c].known = ds.is_known(static_cast<std::uint32_t>(c));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Instance& inst = ds.rows[rows[i]];
    const bool known = ds.is_known(inst.label);
    const bool ood = is_ood(preds[i].score);
    InstanceRecord rec{rows[i], inst.label, preds[i].predicted_class, preds[i].score.value, ood, known};
    rep.instances.push_back(rec);
    ClassRow& cr = per[inst.label];
    ++cr.count;
    cr.mean_score += rec.ova_score;
    if (known) {
      ++known_n;
      const bool hit = rec.predicted_class == inst.label;
      known_hit += hit;
      known_open_hit += hit && !ood;
      cr.accuracy += hit;
      id_scores.push_back(rec.ova_score);
      (ood ? rep.confusion.id_as_ood : rep.confusion.id_as_id)++;
    } else {
      ++unk_n;
      unk_hit += ood;
      cr.accuracy += ood;
      ood_scores.push_back(rec.ova_score);
      (ood ? rep.confusion.ood_as_ood : rep.confusion.ood_as_id)++;
    }
  }
  for (ClassRow& cr : per) {
    if (cr.count) {
      cr.accuracy /= static_cast<double>(cr.count);
      cr.mean_score /= static_cast<double>(cr.count);
    }
  }
  rep.per_class = std::move(per);
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  rep.closed_set_accuracy = frac(known_hit, known_n);
  rep.known_accuracy = frac(known_open_hit, known_n);
  rep.unknown_recall = frac(unk_hit, unk_n);
  if (!id_scores.empty() && !ood_scores.empty()) rep.auroc = auroc(id_scores, ood_scores);
  const double a = rep.known_accuracy, b = rep.unknown_recall;
  rep.harmonic_mean = (a + b) > 0 ? 2 * a * b / (a + b) : 0.0;
  rep.corrupted_accuracy = corrupted_accuracy(model, ds, spec.seed);
  rep.cross_prediction = cross_prediction(model, ds, spec.pool_size);
  return rep;
}

inline EvalReport run_ood_detection(const HoodModel<float>& model, TaskSpec spec) {
  spec.kind = TaskKind::ood_detection;
  return evaluate(model, spec);
}

inline EvalReport run_open_set_ssl(const HoodModel<float>& model, TaskSpec spec) {
  spec.kind = TaskKind::open_set_ssl;
  return evaluate(model, spec);
}

inline EvalReport run_open_set_da(const HoodModel<float>& model, TaskSpec spec) {
  spec.kind = TaskKind::open_set_da;
  return evaluate(model, spec);
}

// Train per the config's deployment, then evaluate on the test split.
struct TaskRun {
  TrainResult train;
  EvalReport report;
};

inline TaskRun run_task(const TrainConfig& cfg, const FactoredDataset& ds) {
  TrainResult tr = train_hood(cfg, ds);
  TaskSpec spec{cfg.task, &ds, cfg.pool_size, cfg.seed};
  EvalReport rep = evaluate(tr.model, spec);
  return {std::move(tr), std::move(rep)};
}

struct SweepRow {
  std::size_t pool_size = 0;
  EvalReport report;
};

// One training run and evaluation per augmentation-pool size.
inline std::vector<SweepRow> run_augmentation_sweep(TrainConfig cfg, const FactoredDataset& ds,
                                                    const std::vector<std::size_t>& pool_sizes) {
  std::vector<SweepRow> out;
  for (std::size_t p : pool_sizes) {
    cfg.pool_size = p;
    out.push_back({p, run_task(cfg, ds).report});
  }
  return out;
}

// "a..b" or a single integer.
inline std::vector<std::size_t> parse_range(const std::string& text) {
  const auto dots = text.find("..");
  try {
    std::size_t used = 0;
    if (dots == std::string::npos) {
      const unsigned long v = std::stoul(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return {v};
    }
    const std::string a = text.substr(0, dots), b = text.substr(dots + 2);
    std::size_t ua = 0, ub = 0;
    const unsigned long lo = std::stoul(a, &ua), hi = std::stoul(b, &ub);
    if (ua != a.size() || ub != b.size() || lo > hi) throw std::invalid_argument(text);
    std::vector<std::size_t> out;
    for (unsigned long v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  } catch (const std::logic_error&) {
    throw std::invalid_argument("range '" + text + "' is not of the form a..b");
  }
}

// Mean OOD score of the benign and malign pools built during training, under
// the final model.
struct ScoreSeparation {
  double benign_mean = 0;
  double malign_mean = 0;
  std::size_t benign_count = 0;
  std::size_t malign_count = 0;
  double gap() const { return malign_mean - benign_mean; }
};

inline double mean_ova_score(const HoodModel<float>& model, const std::vector<AugmentedSample>& samples) {
  if (samples.empty()) return 0.0;
  const std::size_t dim = samples.front().x_aug.size();
  Tensor<float> xs = Tensor<float>::matrix(samples.size(), dim);
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy(samples[i].x_aug.begin(), samples[i].x_aug.end(), xs.row(i).begin());
  double total = 0;
  for (const auto& s : ova_score(xs, model)) total += s.value;
  return total / static_cast<double>(samples.size());
}

inline ScoreSeparation score_separation(const HoodModel<float>& model, const DataPools& pools) {
  ScoreSeparation out;
  out.benign_mean = mean_ova_score(model, pools.benign);
  out.malign_mean = mean_ova_score(model, pools.malign);
  out.benign_count = pools.benign.size();
  out.malign_count = pools.malign.size();
  return out;
}

}  // namespace hood
