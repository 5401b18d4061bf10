#include <gtest/gtest.h>

#include <filesystem>

#include "hood/serialize.hpp"

using namespace hood;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("hood_io_" + name)).string();
}

}  // namespace

TEST(TrainConfigJson, RoundTripsEveryField) {
  TrainConfig c;
  c.task = TaskKind::open_set_da;
  c.max_iter = 777;
  c.augmentation_iter = 100;
  c.augment_repeat_every = 50;
  c.pseudo_threshold = 0.9;
  c.batch_size = 30;
  c.seed = 123456789012345ULL;
  c.pool_size = 6;
  c.intervention.epsilon = 0.05;
  c.intervention.steps = 7;
  c.intervention.step_size = 0.01;
  c.intervention.norm = PerturbNorm::l2;
  c.use_regularizers = false;
  c.ova_unknown_all_heads = true;
  c.latent_dim = 4;
  c.grad_clip = 0.0;
  c.kl_warmup = 10;
  c.schedule.base_lr = 0.01;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.task, TaskKind::open_set_da);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.intervention.norm, PerturbNorm::l2);
  EXPECT_EQ(*back.intervention.step_size, 0.01);
}

TEST(TrainConfigJson, MissingFieldsKeepDefaults) {
  const TrainConfig c = train_config_from_json(Json::parse(R"({"max_iter": 50})"));
  EXPECT_EQ(c.max_iter, 50);
  EXPECT_EQ(c.pool_size, 4u);
  EXPECT_EQ(c.pseudo_threshold, 0.95);
  EXPECT_EQ(c.intervention.epsilon, 0.03);
  EXPECT_EQ(c.intervention.steps, 15);
}

TEST(TrainConfigJson, InvalidInputsRaiseConfigError) {
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"max_iters": 5})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"max_iter": "many"})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"task": "clustering"})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"max_iter": 100, "augmentation_iter": 200})")),
               ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"pseudo_threshold": 0})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"intervention": {"norm": "l1"}})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"intervention": {"steps": 0}})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"pool_size": 7})")), ConfigError);
  EXPECT_THROW(train_config_from_json(Json::parse("[1, 2]")), ConfigError);
}

TEST(TrainConfigJson, FilesLoadAndFailWithTypedErrors) {
  const std::string good = temp_path("cfg.json"), bad = temp_path("bad.json");
  save_text(good, R"({"max_iter": 300, "seed": 5})");
  save_text(bad, "{ not json");
  EXPECT_EQ(load_train_config(good).seed, 5u);
  EXPECT_THROW(load_train_config(bad), ConfigError);
  EXPECT_THROW(load_train_config(temp_path("missing.json")), IoError);
  std::filesystem::remove(good);
  std::filesystem::remove(bad);
}

TEST(FactorSpecJson, RoundTripsAndValidates) {
  FactorSpec s;
  s.num_unknown_classes = 2;
  s.source_styles = {0};
  s.target_styles = {1, 2};
  s.noise = 0.01;
  const FactorSpec back = factor_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_THROW(factor_spec_from_json(Json::parse(R"({"num_known_classes": 0})")), ConfigError);
  EXPECT_THROW(factor_spec_from_json(Json::parse(R"({"colour": 3})")), ConfigError);
}

TEST(ReportJson, ContainsEveryMetric) {
  EvalReport r;
  r.closed_set_accuracy = 0.9;
  r.per_class.push_back({0, true, 10, 0.8, 0.1});
  r.cross_prediction = CrossPredictionGrid{1, 0.2, 0.1, 0.95, 1.0 / 6, 0.2};
  Json j = to_json(r);
  EXPECT_TRUE(j["auroc"].is_null());
  EXPECT_EQ(j["closed_set_accuracy"], 0.9);
  EXPECT_EQ(j["cross_prediction"]["style_to_domain"], 0.95);
  EXPECT_EQ(j["per_class"][0]["count"], 10);
  for (const char* k : {"corrupted_accuracy", "unknown_recall", "known_accuracy", "harmonic_mean", "confusion"})
    EXPECT_TRUE(j.contains(k)) << k;
  r.auroc = 0.75;
  EXPECT_EQ(to_json(r)["auroc"], 0.75);
}

TEST(ReportCsv, InstancesHaveOneLinePerRow) {
  EvalReport r;
  r.instances.push_back({7, 2, 2, 0.25, false, true});
  r.instances.push_back({8, 9, 1, 0.5, true, false});
  EXPECT_EQ(instances_csv(r),
            "instance_id,true_class,predicted_class,ova_score,is_ood\n7,2,2,0.25,0\n8,9,1,0.5,1\n");
}

TEST(ReportCsv, TrainLogHasHeaderAndRows) {
  std::vector<TrainLogRow> log(3);
  log[2].iter = 3;
  const std::string csv = train_log_csv(log);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("iter,lr,", 0), 0u);
}
