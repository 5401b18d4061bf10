#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/graph.hpp"
#include "hood/model.hpp"

namespace hood {

// One (in, out) logit pair per known class.
template <typename T>
struct OvaLogits {
  std::vector<T> in;
  std::vector<T> out;

  std::size_t num_classes() const { return in.size(); }
};

inline constexpr double kOodThreshold = 0.5;

// Out-probability at the predicted class, in [0,1].
struct OvaScore {
  double value = 0.0;
};

// Scores at exactly 0.5 count as out-of-distribution.
inline bool is_ood(OvaScore score) { return score.value >= kOodThreshold; }

// softmax(in, out) taken at the out entry.
template <typename T>
double pair_out_probability(T in_logit, T out_logit) {
  return Graph<double>::sigmoid_value(static_cast<double>(out_logit) -
                                      static_cast<double>(in_logit));
}

struct OvaOptions {
  // Malign instances supervise only the head of their original label unless set.
  bool unknown_all_heads = false;
};

// Target matrix for a batch: +1 where the pair should favour "in", -1 for
// "out", 0 for heads left unsupervised.
inline std::vector<double> ova_targets(const std::vector<std::size_t>& y,
                                       const std::vector<bool>& is_unknown, std::size_t k,
                                       const OvaOptions& opt = {}) {
  if (y.size() != is_unknown.size()) throw std::invalid_argument("ova: label/flag count mismatch");
  std::vector<double> t(y.size() * k, 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] >= k) {
      throw std::out_of_range("ova: label " + std::to_string(y[i]) + " outside [0," +
                              std::to_string(k) + ")");
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (!is_unknown[i]) {
        t[i * k + j] = (j == y[i]) ? 1.0 : -1.0;
      } else if (opt.unknown_all_heads || j == y[i]) {
        t[i * k + j] = -1.0;
      }
    }
  }
  return t;
}

// Sum of binary log-losses per row, averaged over the active rows (all rows
// when `active` is empty). `logits` is [n, 2K].
template <typename T>
Var<T> ova_loss_graph(Var<T> logits, const std::vector<std::size_t>& y,
                      const std::vector<bool>& is_unknown, const OvaOptions& opt = {},
                      const std::vector<bool>& active = {}) {
  Graph<T>& g = logits.graph();
  const std::size_t n = logits.value().rows();
  if (logits.value().cols() % 2 != 0) throw std::invalid_argument("ova: odd logit count");
  const std::size_t k = logits.value().cols() / 2;
  if (y.size() != n) throw std::invalid_argument("ova: label count mismatch");
  if (!active.empty() && active.size() != n) throw std::invalid_argument("ova: mask size mismatch");
  const std::vector<double> targets = ova_targets(y, is_unknown, k, opt);
  std::size_t n_active = n;
  if (!active.empty()) n_active = static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
  Tensor<T> sign = Tensor<T>::matrix(n, k);
  Tensor<T> mask = Tensor<T>::matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    const bool on = active.empty() || active[i];
    for (std::size_t j = 0; j < k; ++j) {
      const double t = targets[i * k + j];
      sign(i, j) = static_cast<T>(t);
      mask(i, j) = (on && t != 0.0) ? T(1) / static_cast<T>(std::max<std::size_t>(n_active, 1)) : T(0);
    }
  }
  // -log sigmoid(z) = softplus(-z) with z = sign * (in - out)
  Var<T> margin = g.sub(g.slice_cols(logits, 0, k), g.slice_cols(logits, k, k));
  Var<T> per_head = g.softplus(g.scale(g.mul(margin, g.constant(sign)), T(-1)));
  return g.sum(g.mul(per_head, g.constant(mask)));
}

// Loss for a single instance given its logit pairs.
template <typename T>
T ova_loss(const OvaLogits<T>& logits, std::size_t y, bool is_unknown, const OvaOptions& opt = {}) {
  const std::size_t k = logits.num_classes();
  if (logits.out.size() != k) throw std::invalid_argument("ova: in/out length mismatch");
  Graph<T> g;
  Tensor<T> packed = Tensor<T>::matrix(1, 2 * k);
  for (std::size_t j = 0; j < k; ++j) {
    packed(0, j) = logits.in[j];
    packed(0, k + j) = logits.out[j];
  }
  return ova_loss_graph<T>(g.constant(packed), {y}, {is_unknown}, opt).value().item();
}

struct OvaPrediction {
  std::size_t predicted_class = 0;
  double confidence = 0.0;  // closed-set softmax probability of the predicted class
  OvaScore score;
};

// Content-branch scoring: predicted class from the class head on the content
// mean, OOD score from that class's one-vs-all pair.
template <typename T>
std::vector<OvaPrediction> ova_predict(const Tensor<T>& x, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  auto enc = b.encode_content(b.input(x));
  const Tensor<T>& logp = b.class_log_probs(enc.mean).value();
  const Tensor<T>& ova = b.ova_logits(enc.mean).value();
  const std::size_t k = model.config().num_classes;
  std::vector<OvaPrediction> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = logp.row(i);
    const std::size_t best =
        static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out[i].predicted_class = best;
    out[i].confidence = std::exp(static_cast<double>(row[best]));
    out[i].score.value = pair_out_probability(ova(i, best), ova(i, k + best));
  }
  return out;
}

template <typename T>
std::vector<OvaScore> ova_score(const Tensor<T>& x, const HoodModel<T>& model) {
  std::vector<OvaScore> out;
  for (const auto& p : ova_predict(x, model)) out.push_back(p.score);
  return out;
}

}  // namespace hood
