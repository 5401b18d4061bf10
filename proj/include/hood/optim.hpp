#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include "hood/tensor.hpp"

namespace hood {

// Named parameter tensors, kept in name order so every traversal
// (optimizer, checkpoint, gradient check) is deterministic.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

struct LrSchedule {
  double base_lr = 3e-2;
  double schedule_const = 7.0 * std::numbers::pi / 16.0;
  std::int64_t horizon = 500'000;
};

// base_lr * cos(const * iter / horizon). Iterations past the horizon hold the
// final rate; negative iterations are treated as 0.
inline double cosine_lr(std::int64_t iter, const LrSchedule& s = {}) {
  const std::int64_t clamped = std::clamp<std::int64_t>(iter, 0, s.horizon);
  if (clamped == 0) return s.base_lr;
  return s.base_lr *
         std::cos(s.schedule_const * static_cast<double>(clamped) / static_cast<double>(s.horizon));
}

template <typename T>
struct OptimizerState {
  ParamSet<T> velocity;
  std::int64_t iteration = 0;
  double momentum = 0.9;
  LrSchedule schedule;
};

// Rescales all gradients jointly so their global L2 norm is at most max_norm.
// Returns the norm before rescaling. max_norm <= 0 leaves them untouched.
template <typename T>
double clip_grad_norm(ParamSet<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (T v : g.storage()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (T& v : g.storage()) v *= f;
  }
  return norm;
}

// Heavy-ball SGD as used by the reference training recipe:
//   v <- m v + g ;  p <- p - lr(iter) v
template <typename T>
void sgd_momentum_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state) {
  const T lr = static_cast<T>(cosine_lr(state.iteration, state.schedule));
  const T m = static_cast<T>(state.momentum);
  for (auto& [name, p] : params) {
    auto g_it = grads.find(name);
    if (g_it == grads.end()) continue;
    const Tensor<T>& g = g_it->second;
    if (g.shape() != p.shape()) {
      throw std::invalid_argument("sgd: gradient shape " + shape_str(g.shape()) +
                                  " does not match parameter '" + name + "' " +
                                  shape_str(p.shape()));
    }
    auto [v_it, inserted] = state.velocity.try_emplace(name, Tensor<T>(p.shape()));
    Tensor<T>& v = v_it->second;
    if (v.shape() != p.shape()) {
      throw std::invalid_argument("sgd: velocity shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
  ++state.iteration;
}

// KL( N(mu, diag(sigma^2)) || N(0, I) ) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 ln sigma)
template <typename T>
T kl_to_standard_normal(std::span<const T> mu, std::span<const T> sigma) {
  if (mu.size() != sigma.size()) {
    throw std::invalid_argument("kl: mean and scale lengths differ");
  }
  T total = T(0);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > T(0))) throw std::domain_error("kl: scale must be strictly positive");
    total += mu[i] * mu[i] + sigma[i] * sigma[i] - T(1) - T(2) * std::log(sigma[i]);
  }
  return T(0.5) * total;
}

}  // namespace hood
