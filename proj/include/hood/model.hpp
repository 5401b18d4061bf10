#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/graph.hpp"
#include "hood/optim.hpp"
#include "hood/random.hpp"
#include "hood/tensor.hpp"

namespace hood {

struct ModelConfig {
  std::size_t input_dim = 64;
  std::size_t hidden = 32;       // encoder / decoder width
  std::size_t head_hidden = 32;  // class, domain and one-vs-all heads
  std::size_t content_dim = 8;
  std::size_t style_dim = 8;
  std::size_t num_classes = 6;
  std::size_t num_domains = 5;  // style-pool size + 1 (the untouched input)
  double recon_sigma = 1.0;     // decoder likelihood std, in standardized input units

  bool operator==(const ModelConfig&) const = default;
};

// Diagonal Gaussian, one row per instance.
template <typename T>
struct GaussianPosterior {
  Tensor<T> mean;
  Tensor<T> scale;

  std::size_t dim() const { return mean.cols(); }
  std::size_t count() const { return mean.rows(); }

  void validate() const {
    if (mean.shape() != scale.shape()) {
      throw std::invalid_argument("posterior: mean " + shape_str(mean.shape()) + " vs scale " +
                                  shape_str(scale.shape()));
    }
    for (T s : scale.storage()) {
      if (!(s > T(0))) throw std::domain_error("posterior: scale must be strictly positive");
    }
  }
};

// The seven named scalars of the modified bound, in nats. elbo() is the plain
// bound; tilde_elbo() adds the two cross-branch regularizers with a minus sign.
struct ElboTerms {
  double kl_content = 0;
  double kl_style = 0;
  double loglik_y_given_c = 0;
  double loglik_d_given_c = 0;
  double loglik_d_given_s = 0;
  double loglik_y_given_s = 0;
  double recon_loglik = 0;

  double elbo() const {
    return -kl_content - kl_style + loglik_y_given_c + loglik_d_given_s + recon_loglik;
  }
  double tilde_elbo() const {
    return -kl_content - kl_style + (loglik_y_given_c - loglik_d_given_c) +
           (loglik_d_given_s - loglik_y_given_s) + recon_loglik;
  }
};

namespace detail {

inline std::string wname(const std::string& prefix, std::size_t layer) {
  return prefix + ".W" + std::to_string(layer);
}
inline std::string bname(const std::string& prefix, std::size_t layer) {
  return prefix + ".b" + std::to_string(layer);
}

// Fixed per-feature standardization applied before the encoders; the decoder
// reconstructs standardized inputs. Not trained.
inline const std::string kInputMean = "input.mean";
inline const std::string kInputStd = "input.std";

inline bool is_frozen(const std::string& name) { return name.rfind("input.", 0) == 0; }

}  // namespace detail

// Every sub-network is a fully connected net with two ReLU hidden layers.
inline constexpr std::size_t kLayersPerNet = 3;

inline std::vector<std::pair<std::string, std::vector<std::size_t>>> net_layouts(
    const ModelConfig& c) {
  return {
      {"enc_c", {c.input_dim, c.hidden, c.hidden, 2 * c.content_dim}},
      {"enc_s", {c.input_dim, c.hidden, c.hidden, 2 * c.style_dim}},
      {"head_c", {c.content_dim, c.head_hidden, c.head_hidden, c.num_classes}},
      {"head_s", {c.style_dim, c.head_hidden, c.head_hidden, c.num_domains}},
      {"dec", {c.content_dim + c.style_dim, c.hidden, c.hidden, c.input_dim}},
      {"ova", {c.content_dim, c.head_hidden, c.head_hidden, 2 * c.num_classes}},
  };
}

template <typename T>
class HoodModel {
 public:
  HoodModel(ModelConfig config, std::uint64_t seed) : config_(config) {
    if (config_.num_classes == 0 || config_.num_domains == 0 || config_.input_dim == 0) {
      throw std::invalid_argument("model: class, domain and input sizes must be positive");
    }
    if (config_.content_dim != config_.style_dim) {
      // The heads are applied across branches, so both latents share a size.
      throw std::invalid_argument("model: content and style latents must have equal size");
    }
    Rng rng(seed);
    for (const auto& [prefix, dims] : net_layouts(config_)) {
      for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor<T> w = Tensor<T>::matrix(fan_in, fan_out);
        for (T& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
        params_.emplace(detail::wname(prefix, l), std::move(w));
        params_.emplace(detail::bname(prefix, l), Tensor<T>(Shape{fan_out}));
      }
    }
    params_.emplace(detail::kInputMean, Tensor<T>(Shape{config_.input_dim}, T(0)));
    params_.emplace(detail::kInputStd, Tensor<T>(Shape{config_.input_dim}, T(1)));
  }

  // Sets the standardization from the rows of x; std is floored at min_std.
  void fit_input_standardization(const Tensor<T>& x, double min_std = 1e-2) {
    if (x.rank() != 2 || x.cols() != config_.input_dim || x.rows() == 0) {
      throw std::invalid_argument("model: standardization needs rows of width " +
                                  std::to_string(config_.input_dim));
    }
    Tensor<T>& mean = params_.at(detail::kInputMean);
    Tensor<T>& sd = params_.at(detail::kInputStd);
    const double n = static_cast<double>(x.rows());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
      m /= n;
      for (std::size_t i = 0; i < x.rows(); ++i) v += (x(i, j) - m) * (x(i, j) - m);
      mean[j] = static_cast<T>(m);
      sd[j] = static_cast<T>(std::max(std::sqrt(v / n), min_std));
    }
  }

  HoodModel(ModelConfig config, ParamSet<T> params)
      : config_(config), params_(std::move(params)) {
    check_layout();
  }

  // Rebuilds the configuration from tensor shapes (used when loading checkpoints).
  static HoodModel from_params(ParamSet<T> params) {
    auto get = [&](const std::string& n) -> const Tensor<T>& {
      auto it = params.find(n);
      if (it == params.end()) throw std::invalid_argument("model: missing tensor '" + n + "'");
      return it->second;
    };
    ModelConfig c;
    c.input_dim = get("enc_c.W0").rows();
    c.hidden = get("enc_c.W0").cols();
    c.content_dim = get("enc_c.W2").cols() / 2;
    c.style_dim = get("enc_s.W2").cols() / 2;
    c.head_hidden = get("head_c.W0").cols();
    c.num_classes = get("head_c.W2").cols();
    c.num_domains = get("head_s.W2").cols();
    return HoodModel(c, std::move(params));
  }

  const ModelConfig& config() const { return config_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }

  template <typename U>
  HoodModel<U> cast() const {
    ParamSet<U> out;
    for (const auto& [n, t] : params_) out.emplace(n, t.template cast<U>());
    return HoodModel<U>(config_, std::move(out));
  }

  void check_layout() const {
    std::size_t expected = 0;
    for (const auto& [prefix, dims] : net_layouts(config_)) {
      for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        auto w = params_.find(detail::wname(prefix, l));
        auto b = params_.find(detail::bname(prefix, l));
        if (w == params_.end() || b == params_.end()) {
          throw std::invalid_argument("model: missing layer " + prefix + "." + std::to_string(l));
        }
        if (w->second.shape() != Shape{dims[l], dims[l + 1]} ||
            b->second.shape() != Shape{dims[l + 1]}) {
          throw std::invalid_argument("model: bad shape for layer " + prefix + "." +
                                      std::to_string(l));
        }
        expected += 2;
      }
    }
    for (const std::string& n : {detail::kInputMean, detail::kInputStd}) {
      auto it = params_.find(n);
      if (it == params_.end()) throw std::invalid_argument("model: missing tensor '" + n + "'");
      if (it->second.shape() != Shape{config_.input_dim}) {
        throw std::invalid_argument("model: bad shape for '" + n + "'");
      }
      for (T v : it->second.storage()) {
        if (n == detail::kInputStd && !(v > T(0))) throw std::invalid_argument("model: non-positive input std");
      }
      ++expected;
    }
    if (expected != params_.size()) throw std::invalid_argument("model: unexpected extra tensors");
  }

 private:
  ModelConfig config_;
  ParamSet<T> params_;
};

// Per-instance ELBO pieces as graph nodes, each of shape [n].
template <typename T>
struct ElboGraph {
  Var<T> kl_content, kl_style;
  Var<T> loglik_y_given_c, loglik_d_given_c, loglik_d_given_s, loglik_y_given_s;
  Var<T> recon_loglik;
  Var<T> content_mean;  // [n, dim(C)], reused by heads that read the content mean
};

struct ObjectiveOptions {
  bool use_regularizers = true;
  double kl_weight = 1.0;  // < 1 during warm-up
  // Stop pushing a cross log-likelihood down once it reaches chance level,
  // log(1/#labels). Without it the two regularizers are unbounded below.
  bool floor_regularizers = true;
};

// A model's parameters placed on a graph, either as trainable leaves or as
// constants (frozen, e.g. during perturbation search).
template <typename T>
class BoundModel {
 public:
  struct Encoded {
    Var<T> mean;
    Var<T> scale;
  };

  BoundModel(Graph<T>& graph, const HoodModel<T>& model, bool trainable)
      : graph_(graph), model_(model) {
    for (const auto& [name, tensor] : model.params()) {
      const bool learn = trainable && !detail::is_frozen(name);
      bound_.emplace(name, learn ? graph.parameter(tensor) : graph.constant(tensor));
    }
  }

  Graph<T>& graph() const { return graph_; }
  const ModelConfig& config() const { return model_.config(); }

  Var<T> input(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.cols() != config().input_dim) {
      throw std::invalid_argument("model: input shape " + shape_str(x.shape()) +
                                  " but expected [n," + std::to_string(config().input_dim) + "]");
    }
    return graph_.constant(x);
  }

  Var<T> mlp(const std::string& prefix, Var<T> x) const {
    Var<T> h = x;
    for (std::size_t l = 0; l < kLayersPerNet; ++l) {
      h = graph_.add_row(graph_.matmul(h, at(detail::wname(prefix, l))),
                         at(detail::bname(prefix, l)));
      if (l + 1 < kLayersPerNet) h = graph_.relu(h);
    }
    return h;
  }

  // (x - mean) / std, per feature.
  Var<T> standardize(Var<T> x) const {
    const Tensor<T>& sd = at(detail::kInputStd).value();
    const std::size_t n = x.value().rows(), d = x.value().cols();
    Tensor<T> inv = Tensor<T>::matrix(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) inv(i, j) = T(1) / sd[j];
    Var<T> centered = graph_.sub(x, graph_.add_row(graph_.constant(Tensor<T>::matrix(n, d)),
                                                    at(detail::kInputMean)));
    return graph_.mul(centered, graph_.constant(std::move(inv)));
  }

  Encoded encode_content(Var<T> x) const { return encode("enc_c", x, config().content_dim); }
  Encoded encode_style(Var<T> x) const { return encode("enc_s", x, config().style_dim); }

  // Reparameterized draw: mean + scale * noise.
  Var<T> sample(const Encoded& e, const Tensor<T>& noise) const {
    if (noise.shape() != e.mean.shape()) {
      throw std::invalid_argument("sample_latent: noise shape " + shape_str(noise.shape()) +
                                  " vs latent " + shape_str(e.mean.shape()));
    }
    return graph_.add(e.mean, graph_.mul(e.scale, graph_.constant(noise)));
  }

  Var<T> class_log_probs(Var<T> latent) const {
    check_latent(latent);
    return graph_.log_softmax(mlp("head_c", latent));
  }
  Var<T> domain_log_probs(Var<T> latent) const {
    check_latent(latent);
    return graph_.log_softmax(mlp("head_s", latent));
  }
  Var<T> decode(Var<T> c, Var<T> s) const {
    check_latent(c);
    check_latent(s);
    return mlp("dec", graph_.concat_cols(c, s));
  }
  // Columns [0,K) are the "in" logits, [K,2K) the "out" logits.
  Var<T> ova_logits(Var<T> c) const {
    check_latent(c);
    return mlp("ova", c);
  }

  // 1/2 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma) per row.
  Var<T> kl_standard_normal(const Encoded& e) const {
    Graph<T>& g = graph_;
    Var<T> terms = g.add_scalar(g.add(g.square(e.mean), g.square(e.scale)), T(-1));
    terms = g.sub(terms, g.scale(g.log(e.scale), T(2)));
    return g.scale(g.sum_cols(terms), T(0.5));
  }

  ElboGraph<T> elbo(Var<T> x, const std::vector<std::size_t>& y, const std::vector<std::size_t>& d,
                    const Tensor<T>& noise_c, const Tensor<T>& noise_s) const {
    Graph<T>& g = graph_;
    const std::size_t n = x.value().rows();
    check_labels(y, config().num_classes, n, "class");
    check_labels(d, config().num_domains, n, "domain");
    Encoded ec = encode_content(x);
    Encoded es = encode_style(x);
    Var<T> c = sample(ec, noise_c);
    Var<T> s = sample(es, noise_s);
    ElboGraph<T> out;
    out.kl_content = kl_standard_normal(ec);
    out.kl_style = kl_standard_normal(es);
    out.loglik_y_given_c = g.pick(class_log_probs(c), y);
    out.loglik_d_given_c = g.pick(domain_log_probs(c), d);
    out.loglik_d_given_s = g.pick(domain_log_probs(s), d);
    out.loglik_y_given_s = g.pick(class_log_probs(s), y);
    // Isotropic Gaussian likelihood with the constant dropped.
    Var<T> resid = g.sub(standardize(x), decode(c, s));
    const double sig = config().recon_sigma;
    out.recon_loglik = g.scale(g.sum_cols(g.square(resid)), static_cast<T>(-0.5 / (sig * sig)));
    out.content_mean = ec.mean;
    return out;
  }

  // Negative mean tilde-ELBO over the rows. class_weight[i] = 0 removes both
  // class-label terms of row i (instances without a trusted class label).
  Var<T> negative_elbo_loss(const ElboGraph<T>& e, const std::vector<T>& class_weight,
                            const ObjectiveOptions& opt = {}) const {
    Graph<T>& g = graph_;
    const std::size_t n = e.kl_content.value().size();
    const T inv = T(1) / static_cast<T>(n);
    std::vector<T> ones(n, inv), neg(n, -inv), cls(n), neg_cls(n);
    std::vector<T> kl(n, static_cast<T>(opt.kl_weight) * inv);
    for (std::size_t i = 0; i < n; ++i) {
      cls[i] = class_weight[i] * inv;
      neg_cls[i] = -class_weight[i] * inv;
    }
    Var<T> loss = g.add(g.weighted_sum(e.kl_content, kl), g.weighted_sum(e.kl_style, kl));
    loss = g.add(loss, g.weighted_sum(e.loglik_y_given_c, neg_cls));
    loss = g.add(loss, g.weighted_sum(e.loglik_d_given_s, neg));
    loss = g.add(loss, g.weighted_sum(e.recon_loglik, neg));
    if (opt.use_regularizers) {
      Var<T> dc = e.loglik_d_given_c, ys = e.loglik_y_given_s;
      if (opt.floor_regularizers) {
        dc = floor_at(dc, -std::log(static_cast<T>(config().num_domains)));
        ys = floor_at(ys, -std::log(static_cast<T>(config().num_classes)));
      }
      loss = g.add(loss, g.weighted_sum(dc, ones));
      loss = g.add(loss, g.weighted_sum(ys, cls));
    }
    return loss;
  }

  ParamSet<T> grads() const {
    ParamSet<T> out;
    for (const auto& [name, v] : bound_) out.emplace(name, graph_.grad(v));
    return out;
  }

  Var<T> at(const std::string& name) const {
    auto it = bound_.find(name);
    if (it == bound_.end()) throw std::out_of_range("model: no tensor '" + name + "'");
    return it->second;
  }

 private:
  Encoded encode(const std::string& prefix, Var<T> x, std::size_t dim) const {
    Var<T> out = mlp(prefix, standardize(x));
    return {graph_.slice_cols(out, 0, dim), graph_.softplus(graph_.slice_cols(out, dim, dim))};
  }

  // max(v, f) elementwise
  Var<T> floor_at(Var<T> v, T f) const {
    return graph_.add_scalar(graph_.relu(graph_.add_scalar(v, -f)), f);
  }

  void check_latent(Var<T> z) const {
    if (z.value().rank() != 2 || z.value().cols() != config().content_dim) {
      throw std::invalid_argument("model: latent shape " + shape_str(z.value().shape()) +
                                  " but expected [n," + std::to_string(config().content_dim) + "]");
    }
  }

  static void check_labels(const std::vector<std::size_t>& labels, std::size_t range,
                           std::size_t n, const char* what) {
    if (labels.size() != n) {
      throw std::invalid_argument(std::string(what) + " labels: count mismatch");
    }
    for (std::size_t l : labels) {
      if (l >= range) {
        throw std::out_of_range(std::string(what) + " label " + std::to_string(l) +
                                " outside [0," + std::to_string(range) + ")");
      }
    }
  }

  Graph<T>& graph_;
  const HoodModel<T>& model_;
  std::map<std::string, Var<T>> bound_;
};

// ---- value-level entry points ----------------------------------------------

template <typename T>
GaussianPosterior<T> encode_content(const Tensor<T>& x, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  auto e = b.encode_content(b.input(x));
  return {e.mean.value(), e.scale.value()};
}

template <typename T>
GaussianPosterior<T> encode_style(const Tensor<T>& x, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  auto e = b.encode_style(b.input(x));
  return {e.mean.value(), e.scale.value()};
}

template <typename T>
Tensor<T> sample_latent(const GaussianPosterior<T>& post, const Tensor<T>& noise) {
  post.validate();
  if (noise.size() != post.mean.size()) {
    throw std::invalid_argument("sample_latent: noise has " + std::to_string(noise.size()) +
                                " entries, latent has " + std::to_string(post.mean.size()));
  }
  Tensor<T> out = post.mean;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += post.scale[i] * noise[i];
  return out;
}

template <typename T>
Tensor<T> classify_class(const Tensor<T>& c, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  return b.class_log_probs(g.constant(c)).value();
}

template <typename T>
Tensor<T> classify_domain(const Tensor<T>& s, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  return b.domain_log_probs(g.constant(s)).value();
}

// Reconstruction in standardized input units.
template <typename T>
Tensor<T> decode(const Tensor<T>& c, const Tensor<T>& s, const HoodModel<T>& model) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  return b.decode(g.constant(c), g.constant(s)).value();
}

// Batch-averaged ELBO terms for rows of x with their labels and noise draws.
template <typename T>
ElboTerms elbo_tilde(const Tensor<T>& x, const std::vector<std::size_t>& y,
                     const std::vector<std::size_t>& d, const HoodModel<T>& model,
                     const Tensor<T>& noise_c, const Tensor<T>& noise_s) {
  Graph<T> g;
  BoundModel<T> b(g, model, false);
  ElboGraph<T> e = b.elbo(b.input(x), y, d, noise_c, noise_s);
  auto avg = [](Var<T> v) {
    double total = 0;
    for (T t : v.value().storage()) total += static_cast<double>(t);
    return total / static_cast<double>(v.value().size());
  };
  ElboTerms t;
  t.kl_content = avg(e.kl_content);
  t.kl_style = avg(e.kl_style);
  t.loglik_y_given_c = avg(e.loglik_y_given_c);
  t.loglik_d_given_c = avg(e.loglik_d_given_c);
  t.loglik_d_given_s = avg(e.loglik_d_given_s);
  t.loglik_y_given_s = avg(e.loglik_y_given_s);
  t.recon_loglik = avg(e.recon_loglik);
  return t;
}

}  // namespace hood
