#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hood/random.hpp"

namespace hood {

// Parametric stand-ins for an image augmentation pool. Each op is
// deterministic and leaves the class label untouched; its position in the
// pool (1-based) is the domain label it produces. Domain 0 is the
// untouched input.
enum class StyleOp : std::uint8_t { brighten, contrast, reverse, texture, gamma, shift };

inline constexpr std::array<StyleOp, 6> kStylePool = {
    StyleOp::brighten, StyleOp::contrast, StyleOp::reverse,
    StyleOp::texture,  StyleOp::gamma,    StyleOp::shift,
};
inline constexpr std::size_t kDefaultPoolSize = 4;
inline constexpr std::size_t kMaxPoolSize = kStylePool.size();

inline std::string_view style_op_name(StyleOp op) {
  switch (op) {
    case StyleOp::brighten: return "brighten";
    case StyleOp::contrast: return "contrast";
    case StyleOp::reverse: return "reverse";
    case StyleOp::texture: return "texture";
    case StyleOp::gamma: return "gamma";
    case StyleOp::shift: return "shift";
  }
  return "?";
}

inline void apply_style_op(StyleOp op, std::span<float> x) {
  const std::size_t n = x.size();
  switch (op) {
    case StyleOp::brighten:
      for (float& v : x) v += 0.15f;
      break;
    case StyleOp::contrast:
      for (float& v : x) v = 0.5f + 2.5f * (v - 0.5f);
      break;
    case StyleOp::reverse:
      std::reverse(x.begin(), x.end());
      break;
    case StyleOp::texture:
      for (std::size_t j = 0; j < n; ++j) {
        x[j] += 0.08f * static_cast<float>(std::sin(2.0 * std::numbers::pi * 4.0 *
                                                     static_cast<double>(j) / static_cast<double>(n)));
      }
      break;
    case StyleOp::gamma:
      for (float& v : x) v = std::pow(std::clamp(v, 0.0f, 1.0f), 0.6f);
      break;
    case StyleOp::shift:
      std::rotate(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n / 4), x.end());
      break;
  }
  for (float& v : x) v = std::clamp(v, 0.0f, 1.0f);
}

struct StyledInput {
  std::vector<float> x;
  std::size_t domain = 0;
};

// aug_id 0 is the identity; aug_id k in [1, pool_size] applies the k-th op.
inline StyledInput apply_style_pool(std::span<const float> x, std::size_t aug_id,
                                    std::size_t pool_size = kDefaultPoolSize) {
  if (pool_size > kMaxPoolSize) {
    throw std::invalid_argument("style pool: size " + std::to_string(pool_size) + " exceeds " +
                                std::to_string(kMaxPoolSize));
  }
  if (aug_id > pool_size) {
    throw std::out_of_range("style pool: aug id " + std::to_string(aug_id) + " outside [0," +
                            std::to_string(pool_size) + "]");
  }
  StyledInput out{std::vector<float>(x.begin(), x.end()), aug_id};
  if (aug_id > 0) apply_style_op(kStylePool[aug_id - 1], out.x);
  return out;
}

// Test-time corruptions. None of them is a member of the style pool.
enum class Corruption : std::uint8_t { gaussian_noise, smoothing, darken };

inline constexpr std::array<Corruption, 3> kCorruptions = {
    Corruption::gaussian_noise, Corruption::smoothing, Corruption::darken};
inline constexpr int kMaxSeverity = 5;

inline std::string_view corruption_name(Corruption c) {
  switch (c) {
    case Corruption::gaussian_noise: return "gaussian_noise";
    case Corruption::smoothing: return "smoothing";
    case Corruption::darken: return "darken";
  }
  return "?";
}

// Severity 0 is the identity; the distance to x never shrinks as severity grows.
inline std::vector<float> corrupt(std::span<const float> x, Corruption kind, int severity,
                                  std::uint64_t seed = 0) {
  if (severity < 0 || severity > kMaxSeverity) {
    throw std::out_of_range("corrupt: severity must be in [0," + std::to_string(kMaxSeverity) + "]");
  }
  std::vector<float> out(x.begin(), x.end());
  if (severity == 0) return out;
  const std::size_t n = out.size();
  switch (kind) {
    case Corruption::gaussian_noise: {
      Rng rng(seed);
      const double sigma = 0.03 * severity;
      for (float& v : out) v = static_cast<float>(v + sigma * rng.normal());
      break;
    }
    case Corruption::smoothing: {
      // severity passes of a circular [1/4, 1/2, 1/4] kernel
      std::vector<float> tmp(n);
      for (int pass = 0; pass < severity; ++pass) {
        for (std::size_t j = 0; j < n; ++j) {
          tmp[j] = 0.25f * out[(j + n - 1) % n] + 0.5f * out[j] + 0.25f * out[(j + 1) % n];
        }
        out.swap(tmp);
      }
      break;
    }
    case Corruption::darken:
      for (float& v : out) v -= 0.05f * static_cast<float>(severity);
      break;
  }
  for (float& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace hood
