#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/augment.hpp"
#include "hood/data.hpp"
#include "hood/graph.hpp"
#include "hood/intervention.hpp"
#include "hood/model.hpp"
#include "hood/optim.hpp"
#include "hood/ova.hpp"
#include "hood/random.hpp"

namespace hood {

enum class TaskKind { ood_detection, open_set_ssl, open_set_da };

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::ood_detection: return "ood_detection";
    case TaskKind::open_set_ssl: return "open_set_ssl";
    case TaskKind::open_set_da: return "open_set_da";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view s) {
  for (TaskKind k : {TaskKind::ood_detection, TaskKind::open_set_ssl, TaskKind::open_set_da})
    if (task_name(k) == s) return k;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

struct TrainConfig {
  TaskKind task = TaskKind::ood_detection;
  int max_iter = 1200;
  int augmentation_iter = 0;  // 0 selects max_iter / 5
  int augment_repeat_every = 0;  // 0: augment exactly once
  double pseudo_threshold = 0.95;
  int pseudo_label_every = 10;
  std::size_t batch_size = 48;
  std::uint64_t seed = 0;
  std::size_t pool_size = kDefaultPoolSize;
  InterventionConfig intervention;
  std::size_t max_augment_sources = 600;
  std::size_t views_per_source = 1;  // style-pool views drawn per labeled source row

  bool use_regularizers = true;
  bool floor_regularizers = true;
  bool use_benign = true;
  bool use_malign = true;
  bool ova_unknown_all_heads = false;
  bool filter_ood_unlabeled = true;

  std::size_t hidden = 32;
  std::size_t head_hidden = 32;
  std::size_t latent_dim = 8;
  double recon_sigma = 1.0;
  double grad_clip = 2.0;  // global gradient norm cap; 0 disables
  int kl_warmup = -1;  // iterations of linear KL ramp-up; -1 selects the pre-training length
  LrSchedule schedule;
  int heldout_every = 10;
  std::string failure_dump;  // where to write the offending batch on a numerical failure

  int effective_augmentation_iter() const {
    return augmentation_iter > 0 ? augmentation_iter : std::max(1, max_iter / 5);
  }
  bool uses_unlabeled() const { return task != TaskKind::ood_detection; }
  std::size_t num_domains() const {
    return pool_size + 1 + (task == TaskKind::open_set_da ? 1 : 0);
  }
  // Domain label given to target-distribution instances in domain adaptation.
  std::size_t target_domain() const { return pool_size + 1; }

  void validate() const {
    if (max_iter <= 0) throw std::invalid_argument("train config: max_iter must be positive");
    const int aug = effective_augmentation_iter();
    if (!(aug > 0 && aug < max_iter)) {
      throw std::invalid_argument("train config: augmentation_iter must lie in (0, max_iter)");
    }
    if (!(pseudo_threshold > 0.0 && pseudo_threshold <= 1.0)) {
      throw std::invalid_argument("train config: pseudo_threshold must lie in (0, 1]");
    }
    if (batch_size < 3) throw std::invalid_argument("train config: batch_size must be >= 3");
    if (pool_size < 1 || pool_size > kMaxPoolSize) {
      throw std::invalid_argument("train config: pool_size must be in [1," +
                                  std::to_string(kMaxPoolSize) + "]");
    }
    if (pseudo_label_every < 1 || heldout_every < 1) {
      throw std::invalid_argument("train config: periods must be >= 1");
    }
    if (!(recon_sigma > 0.0)) throw std::invalid_argument("train config: recon_sigma must be > 0");
    intervention.validate();
  }
};

struct PseudoLabel {
  std::size_t label = 0;
  double confidence = 0.0;
  double ood_score = 0.0;
  bool confident = false;     // confidence >= threshold
  bool flagged_ood = false;   // one-vs-all score >= 0.5
  bool class_supervised() const { return confident && !flagged_ood; }
};

// Predicted class and confidence for every row; rows below tau are kept for
// the domain branch but excluded from class supervision.
inline std::vector<PseudoLabel> assign_pseudo_labels(const HoodModel<float>& model,
                                                     const Tensor<float>& unlabeled, double tau,
                                                     bool filter_ood = false) {
  std::vector<PseudoLabel> out;
  if (unlabeled.rows() == 0 || unlabeled.size() == 0) return out;
  const auto preds = ova_predict(unlabeled, model);
  out.resize(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out[i].label = preds[i].predicted_class;
    out[i].confidence = preds[i].confidence;
    out[i].ood_score = preds[i].score.value;
    out[i].confident = preds[i].confidence >= tau;
    out[i].flagged_ood = filter_ood && is_ood(preds[i].score);
  }
  return out;
}

struct DataPools {
  Tensor<float> labeled_x;
  std::vector<std::size_t> labeled_y;
  std::vector<std::size_t> labeled_rows;  // dataset row ids
  Tensor<float> unlabeled_x;
  std::vector<std::size_t> unlabeled_rows;
  std::vector<PseudoLabel> pseudo;
  std::vector<AugmentedSample> benign;
  std::vector<AugmentedSample> malign;

  static DataPools from_dataset(const FactoredDataset& ds, bool with_unlabeled) {
    DataPools p;
    p.labeled_rows = ds.indices(Split::labeled);
    p.labeled_x = ds.features(p.labeled_rows);
    for (std::size_t r : p.labeled_rows) {
      if (!ds.is_known(ds.rows[r].label)) {
        throw std::invalid_argument("dataset: unknown class in the labeled split");
      }
      p.labeled_y.push_back(ds.rows[r].label);
    }
    if (with_unlabeled) {
      p.unlabeled_rows = ds.indices(Split::unlabeled);
      p.unlabeled_x = ds.features(p.unlabeled_rows);
    } else {
      p.unlabeled_x = Tensor<float>::matrix(0, ds.dim);
    }
    return p;
  }
};

struct TrainLogRow {
  int iter = 0;
  double lr = 0;
  ElboTerms elbo;  // batch means over the original-data batch
  double tilde_elbo = 0;
  double elbo_loss = 0;
  double benign_loss = 0;
  double malign_loss = 0;
  double ova_known_loss = 0;
  double total_loss = 0;
  double heldout_tilde_elbo = 0;
  double grad_norm = 0;
  std::size_t benign_pool = 0;
  std::size_t malign_pool = 0;
  std::size_t pseudo_included = 0;
  std::size_t pseudo_ood = 0;
};

// Bookkeeping that lets tests confirm how each pool was routed.
struct TrainCounters {
  std::size_t benign_class_supervised = 0;
  std::size_t benign_label_mismatch = 0;
  std::size_t malign_unknown_supervised = 0;
  std::size_t malign_class_supervised = 0;
  std::size_t augmentation_events = 0;
  std::vector<std::size_t> unlabeled_excluded;  // per pseudo-label refresh
  std::vector<std::size_t> unlabeled_included;
};

struct TrainResult {
  HoodModel<float> model;
  std::vector<TrainLogRow> log;
  DataPools pools;
  TrainCounters counters;
  int augmentation_iter = 0;
};

namespace detail {

struct Batch {
  Tensor<float> x;
  std::vector<std::size_t> y;
  std::vector<std::size_t> d;
  std::vector<float> class_weight;
  std::vector<bool> ova_known;  // rows that supervise the one-vs-all head as known
};

inline Tensor<float> normal_tensor(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor<float> t = Tensor<float>::matrix(rows, cols);
  for (float& v : t.storage()) v = static_cast<float>(rng.normal());
  return t;
}

inline void dump_batch(const std::string& path, const Batch& b) {
  FactoredDataset ds;
  ds.dim = static_cast<std::uint32_t>(b.x.cols());
  std::uint32_t max_y = 0, max_d = 0;
  for (std::size_t i = 0; i < b.x.rows(); ++i) {
    Instance inst;
    inst.x.assign(b.x.row(i).begin(), b.x.row(i).end());
    inst.label = inst.content_id = static_cast<std::uint32_t>(b.y[i]);
    inst.domain = inst.style_id = static_cast<std::uint32_t>(b.d[i]);
    max_y = std::max(max_y, inst.label);
    max_d = std::max(max_d, inst.domain);
    ds.rows.push_back(std::move(inst));
  }
  ds.num_known = ds.num_classes = max_y + 1;
  ds.num_styles = max_d + 1;
  save_dataset(path, ds);
}

}  // namespace detail

class HoodTrainer {
 public:
  HoodTrainer(TrainConfig cfg, const FactoredDataset& ds)
      : cfg_(std::move(cfg)),
        ds_(ds),
        rng_(cfg_.seed),
        model_(make_model_config(cfg_, ds), rng_.fork(1).next()) {
    pools_ = DataPools::from_dataset(ds, cfg_.uses_unlabeled());
    if (pools_.labeled_y.empty()) throw std::invalid_argument("train: empty labeled split");
    model_.fit_input_standardization(pools_.labeled_x);
    opt_.schedule = cfg_.schedule;
    Rng hold = rng_.fork(2);
    auto test_rows = ds.indices(Split::test);
    for (std::size_t r : test_rows) {
      if (ds.is_known(ds.rows[r].label) && heldout_rows_.size() < 64) heldout_rows_.push_back(r);
    }
    if (heldout_rows_.empty()) heldout_rows_ = std::vector<std::size_t>(pools_.labeled_rows.begin(),
                                                                       pools_.labeled_rows.begin() + 1);
    heldout_noise_c_ = detail::normal_tensor(hold, heldout_rows_.size(), cfg_.latent_dim);
    heldout_noise_s_ = detail::normal_tensor(hold, heldout_rows_.size(), cfg_.latent_dim);
  }

  static ModelConfig make_model_config(const TrainConfig& cfg, const FactoredDataset& ds) {
    cfg.validate();
    ModelConfig m;
    m.input_dim = ds.dim;
    m.hidden = cfg.hidden;
    m.head_hidden = cfg.head_hidden;
    m.content_dim = m.style_dim = cfg.latent_dim;
    m.num_classes = ds.num_known;
    m.num_domains = cfg.num_domains();
    m.recon_sigma = cfg.recon_sigma;
    return m;
  }

  TrainResult run() {
    const int aug_iter = cfg_.effective_augmentation_iter();
    double heldout = heldout_tilde_elbo();
    for (int it = 1; it <= cfg_.max_iter; ++it) {
      if (cfg_.uses_unlabeled() &&
          (it == 1 || it % cfg_.pseudo_label_every == 0 || it == aug_iter)) {
        refresh_pseudo_labels();
      }
      const bool repeat = cfg_.augment_repeat_every > 0 && it > aug_iter &&
                          (it - aug_iter) % cfg_.augment_repeat_every == 0;
      if (it == aug_iter || repeat) augment();
      if (it % cfg_.heldout_every == 0) heldout = heldout_tilde_elbo();
      TrainLogRow row = step(it);
      row.heldout_tilde_elbo = heldout;
      log_.push_back(row);
    }
    return TrainResult{model_, std::move(log_), std::move(pools_), counters_, aug_iter};
  }

  const HoodModel<float>& model() const { return model_; }

 private:
  void refresh_pseudo_labels() {
    pools_.pseudo = assign_pseudo_labels(model_, pools_.unlabeled_x, cfg_.pseudo_threshold,
                                         cfg_.filter_ood_unlabeled);
    std::size_t inc = 0;
    for (const auto& p : pools_.pseudo) inc += p.class_supervised() ? 1 : 0;
    counters_.unlabeled_included.push_back(inc);
    counters_.unlabeled_excluded.push_back(pools_.pseudo.size() - inc);
  }

  bool is_target_row(bool unlabeled) const {
    return unlabeled && cfg_.task == TaskKind::open_set_da;
  }

  // Style-pool view of one original instance.
  std::pair<std::vector<float>, std::size_t> styled(std::span<const float> x, bool unlabeled,
                                                    Rng& rng) const {
    if (is_target_row(unlabeled)) return {std::vector<float>(x.begin(), x.end()), cfg_.target_domain()};
    const std::size_t aug = rng.below(cfg_.pool_size + 1);
    auto s = apply_style_pool(x, aug, cfg_.pool_size);
    return {std::move(s.x), s.domain};
  }

  void augment() {
    ++counters_.augmentation_events;
    struct Source {
      std::vector<float> x;
      std::size_t y, d;
      bool unlabeled;
    };
    std::vector<Source> sources;
    Rng rng = rng_.fork(100 + counters_.augmentation_events);
    for (std::size_t v = 0; v < std::max<std::size_t>(cfg_.views_per_source, 1); ++v) {
      for (std::size_t i = 0; i < pools_.labeled_y.size(); ++i) {
        auto [x, d] = styled(pools_.labeled_x.row(i), false, rng);
        sources.push_back({std::move(x), pools_.labeled_y[i], d, false});
      }
    }
    for (std::size_t i = 0; i < pools_.pseudo.size(); ++i) {
      if (!pools_.pseudo[i].class_supervised()) continue;
      auto [x, d] = styled(pools_.unlabeled_x.row(i), true, rng);
      sources.push_back({std::move(x), pools_.pseudo[i].label, d, true});
    }
    if (sources.size() > cfg_.max_augment_sources) {
      // keep every labeled source, subsample the rest
      std::size_t n_lab = 0;
      while (n_lab < sources.size() && !sources[n_lab].unlabeled) ++n_lab;
      std::vector<Source> rest(std::make_move_iterator(sources.begin() + static_cast<std::ptrdiff_t>(std::min(n_lab, sources.size()))),
                               std::make_move_iterator(sources.end()));
      sources.resize(std::min(n_lab, sources.size()));
      rng.shuffle(rest);
      for (auto& s : rest) {
        if (sources.size() >= std::max(cfg_.max_augment_sources, n_lab)) break;
        sources.push_back(std::move(s));
      }
    }

    auto run_mode = [&](InterventionMode mode, bool source_only, std::vector<AugmentedSample>& dst) {
      std::vector<const Source*> chosen;
      for (const auto& s : sources)
        if (!source_only || !s.unlabeled) chosen.push_back(&s);
      constexpr std::size_t kChunk = 256;
      InterventionConfig icfg = cfg_.intervention;
      icfg.mode = mode;
      icfg.target_domain = cfg_.target_domain();
      for (std::size_t start = 0; start < chosen.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, chosen.size() - start);
        Tensor<float> x = Tensor<float>::matrix(n, ds_.dim);
        std::vector<std::size_t> y(n), d(n);
        for (std::size_t i = 0; i < n; ++i) {
          const Source& s = *chosen[start + i];
          std::copy(s.x.begin(), s.x.end(), x.row(i).begin());
          y[i] = s.y;
          d[i] = s.d;
        }
        auto out = pgd_augment(x, y, d, icfg, model_, nullptr, dst.size());
        for (std::size_t i = 0; i < n; ++i) {
          if (out[i].label != y[i]) ++counters_.benign_label_mismatch;
          dst.push_back(std::move(out[i]));
        }
      }
    };
    if (cfg_.use_benign) {
      const bool targeted = cfg_.task == TaskKind::open_set_da;
      run_mode(targeted ? InterventionMode::positive_targeted : InterventionMode::positive, targeted,
               pools_.benign);
    }
    if (cfg_.use_malign) run_mode(InterventionMode::negative, false, pools_.malign);
  }

  detail::Batch original_batch(std::size_t n, Rng& rng) const {
    detail::Batch b;
    b.x = Tensor<float>::matrix(n, ds_.dim);
    const bool with_u = cfg_.uses_unlabeled() && !pools_.pseudo.empty();
    const std::size_t n_l = with_u ? (n + 1) / 2 : n;
    for (std::size_t i = 0; i < n; ++i) {
      const bool unlabeled = i >= n_l;
      std::size_t y = 0;
      float w = 1.0f;
      bool known = !unlabeled;
      std::span<const float> src;
      if (!unlabeled) {
        const std::size_t k = rng.below(pools_.labeled_y.size());
        src = pools_.labeled_x.row(k);
        y = pools_.labeled_y[k];
      } else {
        const std::size_t k = rng.below(pools_.pseudo.size());
        src = pools_.unlabeled_x.row(k);
        y = pools_.pseudo[k].label;
        w = pools_.pseudo[k].class_supervised() ? 1.0f : 0.0f;
      }
      auto [x, d] = styled(src, unlabeled, rng);
      std::copy(x.begin(), x.end(), b.x.row(i).begin());
      b.y.push_back(y);
      b.d.push_back(d);
      b.class_weight.push_back(w);
      b.ova_known.push_back(known);
    }
    return b;
  }

  template <typename Pool>
  detail::Batch pool_batch(const Pool& pool, std::size_t n, Rng& rng) const {
    detail::Batch b;
    b.x = Tensor<float>::matrix(n, ds_.dim);
    for (std::size_t i = 0; i < n; ++i) {
      const AugmentedSample& s = pool[rng.below(pool.size())];
      std::copy(s.x_aug.begin(), s.x_aug.end(), b.x.row(i).begin());
      b.y.push_back(s.label);
      b.d.push_back(s.domain);
      b.class_weight.push_back(1.0f);
      b.ova_known.push_back(s.kind == SampleKind::benign);
    }
    return b;
  }

  TrainLogRow step(int it) {
    Rng rng = rng_.fork(static_cast<std::uint64_t>(it) * 7919ULL);
    const bool have_benign = !pools_.benign.empty();
    const bool have_malign = !pools_.malign.empty();
    const bool augmented = have_benign || have_malign;
    const std::size_t third = cfg_.batch_size / 3;
    const std::size_t n_orig = augmented ? third : cfg_.batch_size;

    detail::Batch orig = original_batch(n_orig, rng);
    std::optional<detail::Batch> ben, mal;
    if (have_benign) ben = pool_batch(pools_.benign, third, rng);
    if (have_malign) mal = pool_batch(pools_.malign, third, rng);
    const std::size_t L = cfg_.latent_dim;
    Tensor<float> nc = detail::normal_tensor(rng, n_orig, L);
    Tensor<float> ns = detail::normal_tensor(rng, n_orig, L);
    Tensor<float> bnc, bns;
    if (ben) {
      bnc = detail::normal_tensor(rng, third, L);
      bns = detail::normal_tensor(rng, third, L);
    }

    TrainLogRow row;
    row.iter = it;
    row.lr = cosine_lr(opt_.iteration, opt_.schedule);
    OvaOptions ova_opt{cfg_.ova_unknown_all_heads};
    ObjectiveOptions obj{cfg_.use_regularizers, kl_weight(it), cfg_.floor_regularizers};
    try {
      Graph<float> g;
      BoundModel<float> m(g, model_, true);
      ElboGraph<float> e = m.elbo(g.constant(orig.x), orig.y, orig.d, nc, ns);
      Var<float> loss = m.negative_elbo_loss(e, orig.class_weight, obj);
      row.elbo_loss = loss.value().item();
      row.elbo = summarize(e, orig.class_weight);
      row.tilde_elbo = row.elbo.tilde_elbo();
      if (std::count(orig.ova_known.begin(), orig.ova_known.end(), true) > 0) {
        std::vector<bool> unk(n_orig, false);
        Var<float> ova = ova_loss_graph<float>(m.ova_logits(e.content_mean), orig.y, unk, ova_opt, orig.ova_known);
        row.ova_known_loss = ova.value().item();
        loss = g.add(loss, ova);
      }
      if (ben) {
        ElboGraph<float> be = m.elbo(g.constant(ben->x), ben->y, ben->d, bnc, bns);
        Var<float> bl = m.negative_elbo_loss(be, ben->class_weight, obj);
        Var<float> ce = g.scale(g.mean(g.pick(m.class_log_probs(be.content_mean), ben->y)), -1.0f);
        std::vector<bool> unk(third, false);
        Var<float> ova = ova_loss_graph<float>(m.ova_logits(be.content_mean), ben->y, unk, ova_opt);
        bl = g.add(g.add(bl, ce), ova);
        row.benign_loss = bl.value().item();
        loss = g.add(loss, bl);
        counters_.benign_class_supervised += third;
      }
      if (mal) {
        auto enc = m.encode_content(g.constant(mal->x));
        std::vector<bool> unk(third, true);
        Var<float> ml = ova_loss_graph<float>(m.ova_logits(enc.mean), mal->y, unk, ova_opt);
        row.malign_loss = ml.value().item();
        loss = g.add(loss, ml);
        counters_.malign_unknown_supervised += third;
      }
      row.total_loss = loss.value().item();
      g.backprop(loss);
      ParamSet<float> grads = m.grads();
      for (const auto& [name, t] : grads) {
        if (!t.all_finite()) throw NumericalError("non-finite gradient for '" + name + "'");
      }
      row.grad_norm = clip_grad_norm(grads, cfg_.grad_clip);
      sgd_momentum_step(model_.params(), grads, opt_);
    } catch (const NumericalError& err) {
      std::string where;
      if (!cfg_.failure_dump.empty()) {
        detail::dump_batch(cfg_.failure_dump, orig);
        where = "; batch written to " + cfg_.failure_dump;
      }
      throw NumericalError("iteration " + std::to_string(it) + ": " + err.what() + where);
    }
    row.benign_pool = pools_.benign.size();
    row.malign_pool = pools_.malign.size();
    for (const auto& p : pools_.pseudo) {
      row.pseudo_included += p.class_supervised() ? 1 : 0;
      row.pseudo_ood += p.flagged_ood ? 1 : 0;
    }
    return row;
  }

  double kl_weight(int it) const {
    const int w = cfg_.kl_warmup < 0 ? cfg_.effective_augmentation_iter() : cfg_.kl_warmup;
    if (w == 0 || it >= w) return 1.0;
    return static_cast<double>(it) / static_cast<double>(w);
  }

  static ElboTerms summarize(const ElboGraph<float>& e, const std::vector<float>& class_weight) {
    auto avg = [](Var<float> v, const std::vector<float>* w) {
      double total = 0, norm = 0;
      const auto& s = v.value().storage();
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double wi = w ? (*w)[i] : 1.0;
        total += wi * s[i];
        norm += 1.0;
      }
      return norm > 0 ? total / norm : 0.0;
    };
    ElboTerms t;
    t.kl_content = avg(e.kl_content, nullptr);
    t.kl_style = avg(e.kl_style, nullptr);
    t.loglik_y_given_c = avg(e.loglik_y_given_c, &class_weight);
    t.loglik_d_given_c = avg(e.loglik_d_given_c, nullptr);
    t.loglik_d_given_s = avg(e.loglik_d_given_s, nullptr);
    t.loglik_y_given_s = avg(e.loglik_y_given_s, &class_weight);
    t.recon_loglik = avg(e.recon_loglik, nullptr);
    return t;
  }

  double heldout_tilde_elbo() const {
    Tensor<float> x = ds_.features(heldout_rows_);
    std::vector<std::size_t> y, d(heldout_rows_.size(), 0);
    for (std::size_t r : heldout_rows_) y.push_back(std::min<std::size_t>(ds_.rows[r].label, ds_.num_known - 1));
    return elbo_tilde(x, y, d, model_, heldout_noise_c_, heldout_noise_s_).tilde_elbo();
  }

  TrainConfig cfg_;
  const FactoredDataset& ds_;
  Rng rng_;
  HoodModel<float> model_;
  OptimizerState<float> opt_;
  DataPools pools_;
  TrainCounters counters_;
  std::vector<TrainLogRow> log_;
  std::vector<std::size_t> heldout_rows_;
  Tensor<float> heldout_noise_c_, heldout_noise_s_;
};

inline TrainResult train_hood(const TrainConfig& cfg, const FactoredDataset& ds) {
  return HoodTrainer(cfg, ds).run();
}

}  // namespace hood
