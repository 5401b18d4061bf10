#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "hood/graph.hpp"
#include "hood/model.hpp"

namespace hood {

enum class PerturbNorm { linf, l2 };

enum class InterventionMode {
  positive,           // keep content, move style away from its domain
  positive_targeted,  // keep content, move style toward a given domain
  negative,           // keep style, move content away from its class
};

struct InterventionConfig {
  double epsilon = 0.03;
  int steps = 15;
  std::optional<double> step_size;  // defaults to epsilon / 4
  PerturbNorm norm = PerturbNorm::linf;
  InterventionMode mode = InterventionMode::positive;
  std::size_t target_domain = 0;  // only read in positive_targeted mode
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  double effective_step() const { return step_size.value_or(epsilon / 4.0); }

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("intervention: epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("intervention: steps must be >= 1");
    if (step_size && !(*step_size > 0.0)) {
      throw std::invalid_argument("intervention: step_size must be > 0");
    }
    if (!(clip_lo < clip_hi)) throw std::invalid_argument("intervention: empty clip range");
  }
};

enum class SampleKind { benign, malign };

struct AugmentedSample {
  std::vector<float> x_aug;
  std::size_t origin_index = 0;
  std::size_t label = 0;   // original class label; malign samples are unknown at this head
  std::size_t domain = 0;  // original domain, or the injected target domain
  SampleKind kind = SampleKind::benign;

  bool is_unknown() const { return kind == SampleKind::malign; }
};

// Squared Euclidean distance between posterior means, per row.
template <typename T>
std::vector<T> content_distance(const GaussianPosterior<T>& p, const GaussianPosterior<T>& q) {
  if (p.mean.shape() != q.mean.shape()) {
    throw std::invalid_argument("content_distance: shapes " + shape_str(p.mean.shape()) + " and " +
                                shape_str(q.mean.shape()));
  }
  std::vector<T> out(p.mean.rows(), T(0));
  for (std::size_t i = 0; i < p.mean.rows(); ++i)
    for (std::size_t j = 0; j < p.mean.cols(); ++j) {
      const T diff = p.mean(i, j) - q.mean(i, j);
      out[i] += diff * diff;
    }
  return out;
}

namespace detail {

template <typename T>
Var<T> row_sq_distance(Var<T> a, Var<T> b) {
  Graph<T>& g = a.graph();
  return g.sum_cols(g.square(g.sub(a, b)));
}

}  // namespace detail

// Per-row intervention objective at x + e, as a graph node of shape [n].
// `labels` holds domains (positive), the target domain (targeted) or classes
// (negative).
template <typename T>
Var<T> intervention_objective(const BoundModel<T>& m, const Tensor<T>& x, Var<T> e,
                              const std::vector<std::size_t>& labels, InterventionMode mode) {
  Graph<T>& g = m.graph();
  Var<T> x0 = m.input(x);
  if (e.value().shape() != x.shape()) {
    throw std::invalid_argument("intervention: perturbation shape " + shape_str(e.value().shape()) +
                                " vs input " + shape_str(x.shape()));
  }
  if (labels.size() != x.rows()) throw std::invalid_argument("intervention: label count mismatch");
  const std::size_t range =
      mode == InterventionMode::negative ? m.config().num_classes : m.config().num_domains;
  for (std::size_t l : labels) {
    if (l >= range) {
      throw std::out_of_range(std::string(mode == InterventionMode::negative ? "class" : "domain") +
                              " label " + std::to_string(l) + " outside [0," +
                              std::to_string(range) + ")");
    }
  }
  Var<T> xe = g.add(x0, e);
  if (mode == InterventionMode::negative) {
    Var<T> dist = detail::row_sq_distance<T>(m.encode_style(x0).mean, m.encode_style(xe).mean);
    Var<T> logp = g.pick(m.class_log_probs(m.encode_content(xe).mean), labels);
    // dist - CE = dist + log p(y)
    return g.add(dist, logp);
  }
  Var<T> dist = detail::row_sq_distance<T>(m.encode_content(x0).mean, m.encode_content(xe).mean);
  Var<T> logp = g.pick(m.domain_log_probs(m.encode_style(xe).mean), labels);
  if (mode == InterventionMode::positive) return g.add(dist, logp);
  return g.sub(dist, logp);  // dist + CE(d')
}

namespace detail {

template <typename T>
T objective_sum(const HoodModel<T>& model, const Tensor<T>& x, const Tensor<T>& e,
                const std::vector<std::size_t>& labels, InterventionMode mode) {
  Graph<T> g;
  BoundModel<T> m(g, model, false);
  Var<T> obj = intervention_objective(m, x, g.constant(e), labels, mode);
  T total = T(0);
  for (T v : obj.value().storage()) total += v;
  return total;
}

}  // namespace detail

// Objective values for the three modes; x and e are [n, D] and the result
// is summed over rows (a single value for one instance).
template <typename T>
T loss_pos(const Tensor<T>& x, const Tensor<T>& e, const std::vector<std::size_t>& d,
           const HoodModel<T>& model) {
  return detail::objective_sum(model, x, e, d, InterventionMode::positive);
}

template <typename T>
T loss_pos_targeted(const Tensor<T>& x, const Tensor<T>& e,
                    const std::vector<std::size_t>& d_prime, const HoodModel<T>& model) {
  return detail::objective_sum(model, x, e, d_prime, InterventionMode::positive_targeted);
}

template <typename T>
T loss_neg(const Tensor<T>& x, const Tensor<T>& e, const std::vector<std::size_t>& y,
           const HoodModel<T>& model) {
  return detail::objective_sum(model, x, e, y, InterventionMode::negative);
}

// Per-row objective value and gradient w.r.t. the perturbation.
template <typename T>
std::pair<std::vector<T>, Tensor<T>> intervention_value_and_grad(
    const HoodModel<T>& model, const Tensor<T>& x, const Tensor<T>& e,
    const std::vector<std::size_t>& labels, InterventionMode mode) {
  Graph<T> g;
  BoundModel<T> m(g, model, false);
  Var<T> ev = g.parameter(e);
  Var<T> obj = intervention_objective(m, x, ev, labels, mode);
  g.backprop(g.sum(obj));
  Tensor<T> grad = g.grad(ev);
  if (!grad.all_finite()) throw NumericalError("pgd: non-finite perturbation gradient");
  return {obj.value().storage(), std::move(grad)};
}

struct PgdTrace {
  std::vector<double> initial_objective;
  std::vector<double> final_objective;
};

// Multi-step projected descent on a single running perturbation per row,
// projected onto the epsilon ball around the ORIGINAL x and clipped to the
// valid input range after every step. The lowest-objective iterate seen
// (including e = 0) is returned for each row.
template <typename T>
std::vector<AugmentedSample> pgd_augment(const Tensor<T>& x, const std::vector<std::size_t>& y,
                                         const std::vector<std::size_t>& d,
                                         const InterventionConfig& cfg, const HoodModel<T>& model,
                                         PgdTrace* trace = nullptr,
                                         std::size_t origin_offset = 0) {
  cfg.validate();
  const std::size_t n = x.rows(), dim = x.cols();
  if (y.size() != n || d.size() != n) throw std::invalid_argument("pgd: label count mismatch");

  std::vector<std::size_t> labels;
  switch (cfg.mode) {
    case InterventionMode::positive: labels = d; break;
    case InterventionMode::positive_targeted: labels.assign(n, cfg.target_domain); break;
    case InterventionMode::negative: labels = y; break;
  }

  Tensor<T> e(x.shape());
  Tensor<T> best_e(x.shape());
  std::vector<T> best_obj;

  if (cfg.epsilon > 0.0) {
    const T eps = static_cast<T>(cfg.epsilon);
    const T alpha = static_cast<T>(cfg.effective_step());
    const T lo = static_cast<T>(cfg.clip_lo), hi = static_cast<T>(cfg.clip_hi);
    for (int step = 0; step <= cfg.steps; ++step) {
      std::vector<T> obj;
      Tensor<T> grad;
      if (step < cfg.steps) {
        std::tie(obj, grad) = intervention_value_and_grad(model, x, e, labels, cfg.mode);
      } else {
        Graph<T> g;
        BoundModel<T> m(g, model, false);
        obj = intervention_objective(m, x, g.constant(e), labels, cfg.mode).value().storage();
      }
      if (step == 0) {
        best_obj = obj;
        if (trace) trace->initial_objective.assign(obj.begin(), obj.end());
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          if (obj[i] < best_obj[i]) {
            best_obj[i] = obj[i];
            std::copy(e.row(i).begin(), e.row(i).end(), best_e.row(i).begin());
          }
        }
      }
      if (step == cfg.steps) break;

      for (std::size_t i = 0; i < n; ++i) {
        auto ei = e.row(i);
        auto gi = grad.row(i);
        if (cfg.norm == PerturbNorm::linf) {
          for (std::size_t j = 0; j < dim; ++j) {
            const T s = gi[j] > T(0) ? T(1) : (gi[j] < T(0) ? T(-1) : T(0));
            ei[j] = std::clamp(ei[j] - alpha * s, -eps, eps);
          }
        } else {
          T gn = T(0);
          for (T v : gi) gn += v * v;
          gn = std::sqrt(gn);
          if (gn > T(0)) {
            for (std::size_t j = 0; j < dim; ++j) ei[j] -= alpha * gi[j] / gn;
          }
          T en = T(0);
          for (T v : ei) en += v * v;
          en = std::sqrt(en);
          if (en > eps) {
            for (T& v : ei) v *= eps / en;
          }
        }
        for (std::size_t j = 0; j < dim; ++j) {
          const T xv = x(i, j);
          ei[j] = std::clamp(xv + ei[j], lo, hi) - xv;
        }
      }
    }
  } else if (trace) {
    Graph<T> g;
    BoundModel<T> m(g, model, false);
    auto obj = intervention_objective(m, x, g.constant(e), labels, cfg.mode).value().storage();
    trace->initial_objective.assign(obj.begin(), obj.end());
    best_obj = obj;
  }
  if (trace) trace->final_objective.assign(best_obj.begin(), best_obj.end());

  std::vector<AugmentedSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    AugmentedSample& s = out[i];
    s.x_aug.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      s.x_aug[j] = cfg.epsilon > 0.0
                       ? static_cast<float>(std::clamp(x(i, j) + best_e(i, j),
                                                       static_cast<T>(cfg.clip_lo),
                                                       static_cast<T>(cfg.clip_hi)))
                       : static_cast<float>(x(i, j));
    }
    s.origin_index = origin_offset + i;
    s.label = y[i];
    s.kind = cfg.mode == InterventionMode::negative ? SampleKind::malign : SampleKind::benign;
    s.domain = cfg.mode == InterventionMode::positive_targeted ? cfg.target_domain : d[i];
  }
  return out;
}

}  // namespace hood
