#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "hood/checkpoint.hpp"
#include "hood/data.hpp"
#include "hood/intervention.hpp"
#include "hood/serialize.hpp"
#include "hood/tasks.hpp"
#include "hood/trainer.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

using namespace hood;

struct Options {
  std::string spec, config, data, out, log, checkpoint, instances, task, mode = "both";
  std::string augmentations = "2..6";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> pool_size;
};

TrainConfig config_for(const Options& o) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  if (!o.task.empty()) cfg.task = parse_task(o.task);
  if (o.seed) cfg.seed = *o.seed;
  if (o.pool_size) cfg.pool_size = *o.pool_size;
  cfg.validate();
  return cfg;
}

void print_json(const Json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    save_json(out, j);
  }
}

int gen_data(const Options& o) {
  FactorSpec spec = o.spec.empty() ? default_factor_spec(o.task.empty() ? TaskKind::ood_detection
                                                                        : parse_task(o.task))
                                   : load_factor_spec(o.spec);
  FactoredDataset ds = generate_synthetic(spec, o.seed.value_or(0));
  save_dataset(o.out, ds);
  std::cout << "wrote " << ds.rows.size() << " rows to " << o.out << "\n";
  return kOk;
}

int train(const Options& o) {
  const TrainConfig cfg = config_for(o);
  const FactoredDataset ds = load_dataset(o.data);
  TrainResult r = train_hood(cfg, ds);
  save_checkpoint(o.out, r.model);
  if (!o.log.empty()) save_text(o.log, train_log_csv(r.log));
  std::cout << "trained " << cfg.max_iter << " iterations; checkpoint " << o.out << "\n";
  return kOk;
}

// Augmented samples in the dataset format: label and domain as usual,
// content_id = origin row, style_id = kind (0 benign, 1 malign).
int augment(const Options& o) {
  const TrainConfig cfg = config_for(o);
  const FactoredDataset ds = load_dataset(o.data);
  const HoodModel<float> model = load_checkpoint(o.checkpoint);
  const auto rows = ds.indices(Split::labeled);
  Rng rng(cfg.seed);
  Tensor<float> x = Tensor<float>::matrix(rows.size(), ds.dim);
  std::vector<std::size_t> y, d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto v = apply_style_pool(ds.rows[rows[i]].x, rng.below(cfg.pool_size + 1), cfg.pool_size);
    std::copy(v.x.begin(), v.x.end(), x.row(i).begin());
    y.push_back(ds.rows[rows[i]].label);
    d.push_back(v.domain);
  }
  std::vector<AugmentedSample> samples;
  auto run = [&](InterventionMode mode) {
    InterventionConfig icfg = cfg.intervention;
    icfg.mode = mode;
    icfg.target_domain = cfg.target_domain();
    if (mode == InterventionMode::positive_targeted && icfg.target_domain >= model.config().num_domains) {
      throw std::invalid_argument("augment: checkpoint has no target-domain logit");
    }
    auto out = pgd_augment(x, y, d, icfg, model);
    samples.insert(samples.end(), out.begin(), out.end());
  };
  const InterventionMode positive = cfg.task == TaskKind::open_set_da ? InterventionMode::positive_targeted
                                                                      : InterventionMode::positive;
  if (o.mode == "benign" || o.mode == "both") run(positive);
  if (o.mode == "malign" || o.mode == "both") run(InterventionMode::negative);

  FactoredDataset out;
  out.dim = ds.dim;
  out.num_known = ds.num_known;
  out.num_classes = ds.num_classes;
  std::uint32_t max_domain = 0;
  for (const auto& s : samples) {
    Instance inst;
    inst.x = s.x_aug;
    inst.label = static_cast<std::uint32_t>(s.label);
    inst.domain = static_cast<std::uint32_t>(s.domain);
    inst.split = Split::labeled;
    inst.content_id = static_cast<std::uint32_t>(rows[s.origin_index]);
    inst.style_id = s.kind == SampleKind::malign ? 1 : 0;
    max_domain = std::max(max_domain, inst.domain);
    out.rows.push_back(std::move(inst));
  }
  out.num_styles = std::max<std::uint32_t>(max_domain + 1, 2);
  save_dataset(o.out, out);
  std::cout << "wrote " << samples.size() << " augmented samples to " << o.out << "\n";
  return kOk;
}

int eval(const Options& o) {
  const TrainConfig cfg = config_for(o);
  const FactoredDataset ds = load_dataset(o.data);
  const HoodModel<float> model = load_checkpoint(o.checkpoint);
  TaskSpec spec{cfg.task, &ds, cfg.pool_size, cfg.seed};
  const EvalReport rep = evaluate(model, spec);
  print_json(to_json(rep), o.out);
  if (!o.instances.empty()) save_text(o.instances, instances_csv(rep));
  return kOk;
}

int probe(const Options& o) {
  const TrainConfig cfg = config_for(o);
  const FactoredDataset ds = load_dataset(o.data);
  const HoodModel<float> model = load_checkpoint(o.checkpoint);
  print_json(to_json(cross_prediction(model, ds, cfg.pool_size)), o.out);
  return kOk;
}

int sweep(const Options& o) {
  const TrainConfig cfg = config_for(o);
  const FactoredDataset ds = load_dataset(o.data);
  const auto sizes = parse_range(o.augmentations);
  for (std::size_t p : sizes) {
    if (p < 1 || p > kMaxPoolSize) {
      throw std::invalid_argument("sweep: pool sizes must lie in [1," + std::to_string(kMaxPoolSize) + "]");
    }
  }
  Json rows = Json::array();
  std::cout << "pool_size,auroc,closed_set_accuracy,corrupted_accuracy,unknown_recall,known_accuracy\n";
  for (const SweepRow& r : run_augmentation_sweep(cfg, ds, sizes)) {
    Json j = to_json(r.report);
    j["pool_size"] = r.pool_size;
    rows.push_back(j);
    std::printf("%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.pool_size, r.report.auroc.value_or(-1.0),
                r.report.closed_set_accuracy, r.report.corrupted_accuracy, r.report.unknown_recall,
                r.report.known_accuracy);
  }
  if (!o.out.empty()) save_json(o.out, rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hood: content/style disentanglement with benign and malign augmentation"};
  app.require_subcommand(1, 1);
  Options o;

  auto seed_opt = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t v) { o.seed = v; }, "random seed");
  };
  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "train config JSON")->check(CLI::ExistingFile);
    c->add_option("--task", o.task, "ood_detection | open_set_ssl | open_set_da");
    c->add_option_function<std::size_t>("--pool-size", [&](std::size_t v) { o.pool_size = v; },
                                        "augmentation pool size");
    seed_opt(c);
  };

  auto* g = app.add_subcommand("gen-data", "generate a synthetic factored dataset");
  g->add_option("--spec", o.spec, "factor spec JSON")->check(CLI::ExistingFile);
  g->add_option("--task", o.task, "preset when no spec is given");
  g->add_option("--out", o.out, "output .hdat")->required();
  seed_opt(g);

  auto* t = app.add_subcommand("train", "train a model");
  common(t);
  t->add_option("--data", o.data, "dataset .hdat")->required();
  t->add_option("--out", o.out, "output checkpoint")->required();
  t->add_option("--log", o.log, "training log CSV");

  auto* a = app.add_subcommand("augment", "dump benign/malign samples for the labeled split");
  common(a);
  a->add_option("--data", o.data)->required();
  a->add_option("--checkpoint", o.checkpoint)->required();
  a->add_option("--out", o.out, "output .hdat")->required();
  a->add_option("--mode", o.mode, "benign | malign | both")
      ->check(CLI::IsMember({"benign", "malign", "both"}));

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  common(e);
  e->add_option("--data", o.data)->required();
  e->add_option("--checkpoint", o.checkpoint)->required();
  e->add_option("--out", o.out, "report JSON (stdout if omitted)");
  e->add_option("--instances", o.instances, "per-instance CSV");

  auto* p = app.add_subcommand("probe", "cross-prediction grid of a checkpoint");
  common(p);
  p->add_option("--data", o.data)->required();
  p->add_option("--checkpoint", o.checkpoint)->required();
  p->add_option("--out", o.out, "grid JSON (stdout if omitted)");

  auto* s = app.add_subcommand("sweep", "train and evaluate across augmentation-pool sizes");
  common(s);
  s->add_option("--data", o.data)->required();
  s->add_option("--augmentations", o.augmentations, "pool sizes, e.g. 2..6");
  s->add_option("--out", o.out, "JSON rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return gen_data(o);
    if (*t) return train(o);
    if (*a) return augment(o);
    if (*e) return eval(o);
    if (*p) return probe(o);
    if (*s) return sweep(o);
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumerical;
  } catch (const IoError& err) {
    std::cerr << "i/o error: " << err.what() << "\n";
    return kIo;
  } catch (const ConfigError& err) {
    std::cerr << "invalid config: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
