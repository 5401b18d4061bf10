#pragma once

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "hood/data.hpp"
#include "hood/io.hpp"
#include "hood/tasks.hpp"
#include "hood/trainer.hpp"

namespace hood {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Reads `key` into `dst` if present. Type mismatches become ConfigError.
template <typename V>
void read_opt(const Json& j, const char* key, V& dst) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(std::string(what) + ": unknown field '" + it.key() + "'");
  }
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json parse_json_file(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

// ---- FactorSpec ---------------------------------------------------------------

inline Json to_json(const FactorSpec& s) {
  return Json{{"num_known_classes", s.num_known_classes},
              {"num_unknown_classes", s.num_unknown_classes},
              {"num_styles", s.num_styles},
              {"dim", s.dim},
              {"content_amplitude", s.content_amplitude},
              {"content_spread", s.content_spread},
              {"style_amplitude", s.style_amplitude},
              {"noise", s.noise},
              {"unknown_overlap", s.unknown_overlap},
              {"unknown_parents", s.unknown_parents},
              {"base_level", s.base_level},
              {"value_lo", s.value_lo},
              {"value_hi", s.value_hi},
              {"n_labeled", s.n_labeled},
              {"n_unlabeled", s.n_unlabeled},
              {"n_test", s.n_test},
              {"unknown_fraction_unlabeled", s.unknown_fraction_unlabeled},
              {"unknown_fraction_test", s.unknown_fraction_test},
              {"source_styles", s.source_styles},
              {"target_styles", s.target_styles}};
}

inline FactorSpec factor_spec_from_json(const Json& j, FactorSpec s = {}) {
  detail::reject_unknown(j,
                         {"num_known_classes", "num_unknown_classes", "num_styles", "dim",
                          "content_amplitude", "content_spread", "style_amplitude", "noise",
                          "unknown_overlap", "unknown_parents", "base_level", "value_lo",
                          "value_hi", "n_labeled", "n_unlabeled", "n_test",
                          "unknown_fraction_unlabeled", "unknown_fraction_test", "source_styles",
                          "target_styles"},
                         "factor spec");
  detail::read_opt(j, "num_known_classes", s.num_known_classes);
  detail::read_opt(j, "num_unknown_classes", s.num_unknown_classes);
  detail::read_opt(j, "num_styles", s.num_styles);
  detail::read_opt(j, "dim", s.dim);
  detail::read_opt(j, "content_amplitude", s.content_amplitude);
  detail::read_opt(j, "content_spread", s.content_spread);
  detail::read_opt(j, "style_amplitude", s.style_amplitude);
  detail::read_opt(j, "noise", s.noise);
  detail::read_opt(j, "unknown_overlap", s.unknown_overlap);
  detail::read_opt(j, "unknown_parents", s.unknown_parents);
  detail::read_opt(j, "base_level", s.base_level);
  detail::read_opt(j, "value_lo", s.value_lo);
  detail::read_opt(j, "value_hi", s.value_hi);
  detail::read_opt(j, "n_labeled", s.n_labeled);
  detail::read_opt(j, "n_unlabeled", s.n_unlabeled);
  detail::read_opt(j, "n_test", s.n_test);
  detail::read_opt(j, "unknown_fraction_unlabeled", s.unknown_fraction_unlabeled);
  detail::read_opt(j, "unknown_fraction_test", s.unknown_fraction_test);
  detail::read_opt(j, "source_styles", s.source_styles);
  detail::read_opt(j, "target_styles", s.target_styles);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

// ---- TrainConfig ----------------------------------------------------------------

inline std::string_view norm_name(PerturbNorm n) { return n == PerturbNorm::linf ? "linf" : "l2"; }

inline Json to_json(const TrainConfig& c) {
  Json icfg{{"epsilon", c.intervention.epsilon},
            {"steps", c.intervention.steps},
            {"norm", norm_name(c.intervention.norm)},
            {"clip_lo", c.intervention.clip_lo},
            {"clip_hi", c.intervention.clip_hi}};
  if (c.intervention.step_size) icfg["step_size"] = *c.intervention.step_size;
  return Json{{"task", task_name(c.task)},
              {"max_iter", c.max_iter},
              {"augmentation_iter", c.augmentation_iter},
              {"augment_repeat_every", c.augment_repeat_every},
              {"pseudo_threshold", c.pseudo_threshold},
              {"pseudo_label_every", c.pseudo_label_every},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"pool_size", c.pool_size},
              {"intervention", icfg},
              {"max_augment_sources", c.max_augment_sources},
              {"views_per_source", c.views_per_source},
              {"use_regularizers", c.use_regularizers},
              {"floor_regularizers", c.floor_regularizers},
              {"use_benign", c.use_benign},
              {"use_malign", c.use_malign},
              {"ova_unknown_all_heads", c.ova_unknown_all_heads},
              {"filter_ood_unlabeled", c.filter_ood_unlabeled},
              {"hidden", c.hidden},
              {"head_hidden", c.head_hidden},
              {"latent_dim", c.latent_dim},
              {"recon_sigma", c.recon_sigma},
              {"grad_clip", c.grad_clip},
              {"kl_warmup", c.kl_warmup},
              {"lr", c.schedule.base_lr},
              {"lr_horizon", c.schedule.horizon},
              {"heldout_every", c.heldout_every}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  detail::reject_unknown(
      j,
      {"task", "max_iter", "augmentation_iter", "augment_repeat_every", "pseudo_threshold",
       "pseudo_label_every", "batch_size", "seed", "pool_size", "intervention",
       "max_augment_sources", "views_per_source", "use_regularizers", "floor_regularizers",
       "use_benign", "use_malign", "ova_unknown_all_heads", "filter_ood_unlabeled", "hidden",
       "head_hidden", "latent_dim", "recon_sigma", "grad_clip", "kl_warmup", "lr", "lr_horizon",
       "heldout_every"},
      "train config");
  if (auto it = j.find("task"); it != j.end()) {
    try {
      c.task = parse_task(it->get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
  }
  detail::read_opt(j, "max_iter", c.max_iter);
  detail::read_opt(j, "augmentation_iter", c.augmentation_iter);
  detail::read_opt(j, "augment_repeat_every", c.augment_repeat_every);
  detail::read_opt(j, "pseudo_threshold", c.pseudo_threshold);
  detail::read_opt(j, "pseudo_label_every", c.pseudo_label_every);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "pool_size", c.pool_size);
  detail::read_opt(j, "max_augment_sources", c.max_augment_sources);
  detail::read_opt(j, "views_per_source", c.views_per_source);
  detail::read_opt(j, "use_regularizers", c.use_regularizers);
  detail::read_opt(j, "floor_regularizers", c.floor_regularizers);
  detail::read_opt(j, "use_benign", c.use_benign);
  detail::read_opt(j, "use_malign", c.use_malign);
  detail::read_opt(j, "ova_unknown_all_heads", c.ova_unknown_all_heads);
  detail::read_opt(j, "filter_ood_unlabeled", c.filter_ood_unlabeled);
  detail::read_opt(j, "hidden", c.hidden);
  detail::read_opt(j, "head_hidden", c.head_hidden);
  detail::read_opt(j, "latent_dim", c.latent_dim);
  detail::read_opt(j, "recon_sigma", c.recon_sigma);
  detail::read_opt(j, "grad_clip", c.grad_clip);
  detail::read_opt(j, "kl_warmup", c.kl_warmup);
  detail::read_opt(j, "lr", c.schedule.base_lr);
  detail::read_opt(j, "lr_horizon", c.schedule.horizon);
  detail::read_opt(j, "heldout_every", c.heldout_every);
  if (auto it = j.find("intervention"); it != j.end()) {
    const Json& ij = *it;
    detail::reject_unknown(ij, {"epsilon", "steps", "step_size", "norm", "clip_lo", "clip_hi"},
                           "intervention");
    detail::read_opt(ij, "epsilon", c.intervention.epsilon);
    detail::read_opt(ij, "steps", c.intervention.steps);
    detail::read_opt(ij, "clip_lo", c.intervention.clip_lo);
    detail::read_opt(ij, "clip_hi", c.intervention.clip_hi);
    if (auto s = ij.find("step_size"); s != ij.end()) {
      double v = 0;
      detail::read_opt(ij, "step_size", v);
      c.intervention.step_size = v;
    }
    if (auto n = ij.find("norm"); n != ij.end()) {
      const std::string name = n->is_string() ? n->get<std::string>() : "";
      if (name == "linf") c.intervention.norm = PerturbNorm::linf;
      else if (name == "l2") c.intervention.norm = PerturbNorm::l2;
      else throw ConfigError("intervention: norm must be \"linf\" or \"l2\"");
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline FactorSpec load_factor_spec(const std::string& path) {
  return factor_spec_from_json(detail::parse_json_file(path));
}

inline TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json(detail::parse_json_file(path));
}

// ---- reports --------------------------------------------------------------------

inline Json to_json(const CrossPredictionGrid& g) {
  return Json{{"content_to_class", g.content_to_class},
              {"content_to_domain", g.content_to_domain},
              {"style_to_class", g.style_to_class},
              {"style_to_domain", g.style_to_domain},
              {"class_chance", g.class_chance},
              {"domain_chance", g.domain_chance}};
}

inline Json to_json(const ScoreSeparation& s) {
  return Json{{"benign_mean", s.benign_mean},
              {"malign_mean", s.malign_mean},
              {"gap", s.gap()},
              {"benign_count", s.benign_count},
              {"malign_count", s.malign_count}};
}

// Per-instance rows go to CSV, not into the JSON report.
inline Json to_json(const EvalReport& r) {
  Json j{{"task", task_name(r.task)}};
  j["auroc"] = r.auroc ? Json(*r.auroc) : Json(nullptr);
  j["closed_set_accuracy"] = r.closed_set_accuracy;
  j["corrupted_accuracy"] = r.corrupted_accuracy;
  j["unknown_recall"] = r.unknown_recall;
  j["known_accuracy"] = r.known_accuracy;
  j["harmonic_mean"] = r.harmonic_mean;
  j["confusion"] = Json{{"id_as_id", r.confusion.id_as_id},
                        {"id_as_ood", r.confusion.id_as_ood},
                        {"ood_as_id", r.confusion.ood_as_id},
                        {"ood_as_ood", r.confusion.ood_as_ood}};
  Json per = Json::array();
  for (const ClassRow& c : r.per_class) {
    per.push_back(Json{{"label", c.label},
                       {"known", c.known},
                       {"count", c.count},
                       {"accuracy", c.accuracy},
                       {"mean_score", c.mean_score}});
  }
  j["per_class"] = per;
  j["cross_prediction"] = r.cross_prediction ? to_json(*r.cross_prediction) : Json(nullptr);
  return j;
}

inline std::string instances_csv(const EvalReport& r) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "instance_id,true_class,predicted_class,ova_score,is_ood\n";
  for (const InstanceRecord& i : r.instances) {
    out << i.id << ',' << i.true_class << ',' << i.predicted_class << ',' << i.ova_score << ','
        << (i.is_ood ? 1 : 0) << '\n';
  }
  return out.str();
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "iter,lr,kl_content,kl_style,loglik_y_given_c,loglik_d_given_c,loglik_d_given_s,"
         "loglik_y_given_s,recon_loglik,tilde_elbo,heldout_tilde_elbo,elbo_loss,ova_known_loss,"
         "benign_loss,malign_loss,total_loss,grad_norm,benign_pool,malign_pool,pseudo_included,"
         "pseudo_ood\n";
  for (const TrainLogRow& r : log) {
    out << r.iter << ',' << r.lr << ',' << r.elbo.kl_content << ',' << r.elbo.kl_style << ','
        << r.elbo.loglik_y_given_c << ',' << r.elbo.loglik_d_given_c << ','
        << r.elbo.loglik_d_given_s << ',' << r.elbo.loglik_y_given_s << ','
        << r.elbo.recon_loglik << ',' << r.tilde_elbo << ',' << r.heldout_tilde_elbo << ','
        << r.elbo_loss << ',' << r.ova_known_loss << ',' << r.benign_loss << ','
        << r.malign_loss << ',' << r.total_loss << ',' << r.grad_norm << ',' << r.benign_pool
        << ',' << r.malign_pool << ',' << r.pseudo_included << ',' << r.pseudo_ood << '\n';
  }
  return out.str();
}

inline void save_json(const std::string& path, const Json& j) {
  detail::write_text(path, j.dump(2) + "\n");
}

inline void save_text(const std::string& path, const std::string& text) {
  detail::write_text(path, text);
}

}  // namespace hood
