#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "coiba/coiba.h"

namespace {

const char* kSmall = R"({
  "seed": 4,
  "model": {"image_size": 16, "patch_size": 4, "depth": 2, "embed_dim": 16, "heads": 2, "mlp_ratio": 2,
            "num_classes": 3},
  "bottleneck": {"iterations": 3, "noise_batch": 2},
  "training": {"samples": 30, "epochs": 1, "batch_size": 10},
  "evaluation": {"samples": 3, "sensitivity_n": [1, 10, 100], "sensitivity_trials": 4},
  "studies": {"samples": 2, "beta_values": [0.1, 10]}
})";

std::string take(char* text) {
  std::string out = text ? text : "";
  coiba_string_free(text);
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("coiba_capi_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

struct Fixture {
  coiba_config* config = nullptr;
  coiba_dataset* train = nullptr;
  coiba_dataset* heldout = nullptr;
  coiba_model* model = nullptr;

  Fixture() {
    EXPECT_EQ(coiba_config_parse(kSmall, &config), COIBA_OK) << coiba_last_error();
    EXPECT_EQ(coiba_dataset_generate(config, &train, &heldout), COIBA_OK) << coiba_last_error();
    EXPECT_EQ(coiba_model_init(config, &model), COIBA_OK) << coiba_last_error();
  }
  ~Fixture() {
    coiba_model_free(model);
    coiba_dataset_free(train);
    coiba_dataset_free(heldout);
    coiba_config_free(config);
  }
};

}  // namespace

TEST(CApi, VersionAndEmptyError) {
  EXPECT_GT(std::strlen(coiba_version()), 0u);
  coiba_config* config = nullptr;
  ASSERT_EQ(coiba_config_default(&config), COIBA_OK);
  EXPECT_STREQ(coiba_last_error(), "");
  coiba_config_free(config);
}

TEST(CApi, ConfigStatusCodes) {
  coiba_config* config = nullptr;
  EXPECT_EQ(coiba_config_parse(R"({"bottleneck": {"betaa": 1}})", &config), COIBA_ERR_CONFIG);
  EXPECT_EQ(config, nullptr);
  EXPECT_NE(std::string(coiba_last_error()).find("betaa"), std::string::npos);
  EXPECT_STREQ(coiba_last_error_kind(), "config");
  EXPECT_EQ(coiba_config_load("/nonexistent/run.json", &config), COIBA_ERR_IO);
  EXPECT_EQ(coiba_config_parse(nullptr, &config), COIBA_ERR_RUNTIME);
  EXPECT_EQ(coiba_config_default(nullptr), COIBA_ERR_RUNTIME);
  EXPECT_NE(std::string(coiba_last_error()).find("out"), std::string::npos);
}

TEST(CApi, MergeKeepsConfigOnFailure) {
  coiba_config* config = nullptr;
  ASSERT_EQ(coiba_config_default(&config), COIBA_OK);
  const std::string before = take([&] { char* s = nullptr; coiba_config_digest(config, &s); return s; }());
  EXPECT_EQ(coiba_config_merge(config, R"({"bottleneck": {"first_layer": 5, "last_layer": 2}})"), COIBA_ERR_CONFIG);
  const std::string same = take([&] { char* s = nullptr; coiba_config_digest(config, &s); return s; }());
  EXPECT_EQ(before, same);
  ASSERT_EQ(coiba_config_merge(config, R"({"bottleneck": {"beta": 10}})"), COIBA_OK);
  char* json = nullptr;
  ASSERT_EQ(coiba_config_to_json(config, &json), COIBA_OK);
  const auto doc = nlohmann::json::parse(take(json));
  EXPECT_DOUBLE_EQ(doc["bottleneck"]["beta"].get<double>(), 10.0);
  EXPECT_EQ(doc["bottleneck"]["iterations"].get<int>(), 10);
  coiba_config_free(config);
}

TEST(CApi, NullFreeIsHarmless) {
  coiba_config_free(nullptr);
  coiba_model_free(nullptr);
  coiba_dataset_free(nullptr);
  coiba_maps_free(nullptr);
  coiba_string_free(nullptr);
}

TEST(CApi, DatasetRoundTripAndSlice) {
  Fixture f;
  EXPECT_EQ(coiba_dataset_size(f.train) + coiba_dataset_size(f.heldout), 30u);
  coiba_dataset* part = nullptr;
  ASSERT_EQ(coiba_dataset_slice(f.heldout, 1, 100, &part), COIBA_OK);
  EXPECT_EQ(coiba_dataset_size(part), coiba_dataset_size(f.heldout) - 1);
  const auto dir = scratch("dataset");
  ASSERT_EQ(coiba_dataset_save(part, dir.c_str()), COIBA_OK) << coiba_last_error();
  coiba_dataset* back = nullptr;
  ASSERT_EQ(coiba_dataset_load((dir / "manifest.csv").c_str(), &back), COIBA_OK) << coiba_last_error();
  EXPECT_EQ(coiba_dataset_size(back), coiba_dataset_size(part));
  coiba_dataset_free(back);
  coiba_dataset_free(part);
  std::filesystem::remove_all(dir);
  EXPECT_EQ(coiba_dataset_load("/nonexistent/manifest.csv", &back), COIBA_ERR_IO);
}

TEST(CApi, ModelSaveLoadDigest) {
  Fixture f;
  const auto dir = scratch("model");
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.cibt").string();
  ASSERT_EQ(coiba_model_save(f.model, path.c_str()), COIBA_OK) << coiba_last_error();
  coiba_model* back = nullptr;
  ASSERT_EQ(coiba_model_load(path.c_str(), &back), COIBA_OK) << coiba_last_error();
  char* a = nullptr;
  char* b = nullptr;
  coiba_model_digest(f.model, &a);
  coiba_model_digest(back, &b);
  EXPECT_EQ(take(a), take(b));
  double accuracy = -1.0;
  ASSERT_EQ(coiba_model_accuracy(back, f.heldout, &accuracy), COIBA_OK);
  EXPECT_GE(accuracy, 0.0);
  EXPECT_LE(accuracy, 1.0);
  coiba_model_free(back);
  EXPECT_EQ(coiba_model_load((dir / "missing.cibt").c_str(), &back), COIBA_ERR_IO);
  EXPECT_STREQ(coiba_last_error_kind(), "io");
  std::filesystem::remove_all(dir);
}

TEST(CApi, TrainingIsDeterministic) {
  Fixture f;
  coiba_model* a = nullptr;
  coiba_model* b = nullptr;
  double accuracy = -1.0;
  char* log = nullptr;
  ASSERT_EQ(coiba_model_train(f.config, f.train, f.heldout, &a, &accuracy, &log), COIBA_OK) << coiba_last_error();
  ASSERT_EQ(coiba_model_train(f.config, f.train, f.heldout, &b, nullptr, nullptr), COIBA_OK);
  EXPECT_EQ(take(log).rfind("epoch,loss,train_accuracy,heldout_accuracy", 0), 0u);
  char* da = nullptr;
  char* db = nullptr;
  coiba_model_digest(a, &da);
  coiba_model_digest(b, &db);
  EXPECT_EQ(take(da), take(db));
  coiba_model_free(a);
  coiba_model_free(b);
}

TEST(CApi, AttributeSaveLoadEvaluate) {
  Fixture f;
  coiba_maps* maps = nullptr;
  ASSERT_EQ(coiba_attribute(f.model, f.heldout, f.config, nullptr, 2, &maps), COIBA_OK) << coiba_last_error();
  ASSERT_EQ(coiba_maps_size(maps), coiba_dataset_size(f.heldout));
  const double* scores = nullptr;
  size_t count = 0;
  ASSERT_EQ(coiba_maps_token_scores(maps, 0, &scores, &count), COIBA_OK);
  EXPECT_EQ(count, 16u);
  double runtime = -1.0;
  EXPECT_EQ(coiba_maps_runtime_ms(maps, 0, &runtime), COIBA_OK);
  EXPECT_GE(runtime, 0.0);
  const double* capacity = nullptr;
  ASSERT_EQ(coiba_maps_layer_capacity(maps, 0, &capacity, &count), COIBA_OK);
  EXPECT_EQ(count, 2u);
  int holds = -1;
  ASSERT_EQ(coiba_maps_upper_bound_holds(maps, 0, &holds), COIBA_OK);
  EXPECT_TRUE(holds == 0 || holds == 1);
  EXPECT_EQ(holds == 1, capacity[0] >= (capacity[0] + capacity[1]) / 2);
  EXPECT_EQ(coiba_maps_token_scores(maps, 999, &scores, &count), COIBA_ERR_RUNTIME);
  EXPECT_STREQ(coiba_last_error_kind(), "index");

  const auto dir = scratch("maps");
  ASSERT_EQ(coiba_maps_save(maps, dir.c_str()), COIBA_OK) << coiba_last_error();
  coiba_maps* back = nullptr;
  ASSERT_EQ(coiba_maps_load(dir.c_str(), f.heldout, f.config, &back), COIBA_OK) << coiba_last_error();
  const double* back_scores = nullptr;
  ASSERT_EQ(coiba_maps_token_scores(back, 0, &back_scores, &count), COIBA_OK);
  coiba_maps_token_scores(maps, 0, &scores, &count);
  for (size_t i = 0; i < count; ++i) EXPECT_EQ(scores[i], back_scores[i]);

  char* summary = nullptr;
  const auto eval_dir = scratch("evaluate");
  ASSERT_EQ(coiba_evaluate(f.model, f.heldout, back, f.config, 1, eval_dir.c_str(), &summary), COIBA_OK)
      << coiba_last_error();
  const auto doc = nlohmann::json::parse(take(summary));
  EXPECT_TRUE(doc.is_object());
  EXPECT_TRUE(std::filesystem::exists(eval_dir / "results.csv"));
  EXPECT_TRUE(std::filesystem::exists(eval_dir / "summary.json"));

  std::filesystem::remove(dir / "map_00001.json");
  coiba_maps* broken = nullptr;
  EXPECT_EQ(coiba_maps_load(dir.c_str(), f.heldout, f.config, &broken), COIBA_ERR_IO);
  EXPECT_NE(std::string(coiba_last_error()).find("map_00001.json"), std::string::npos) << coiba_last_error();
  EXPECT_EQ(broken, nullptr);

  coiba_maps_free(back);
  coiba_maps_free(maps);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(eval_dir);
}

TEST(CApi, StudiesWriteTheirFiles) {
  Fixture f;
  coiba_dataset* two = nullptr;
  ASSERT_EQ(coiba_dataset_slice(f.heldout, 0, 2, &two), COIBA_OK);
  const auto dir = scratch("studies");
  char* summary = nullptr;
  ASSERT_EQ(coiba_compare_layers(f.model, two, f.config, nullptr, 1, (dir / "layers").c_str(), &summary), COIBA_OK)
      << coiba_last_error();
  EXPECT_EQ(nlohmann::json::parse(take(summary))["best_counts"].size(), 2u);
  ASSERT_EQ(coiba_sanity_check(f.model, two, f.config, nullptr, 1, (dir / "sanity").c_str(), nullptr), COIBA_OK)
      << coiba_last_error();
  EXPECT_TRUE(std::filesystem::exists(dir / "sanity" / "sanity.csv"));
  ASSERT_EQ(coiba_ablate(f.model, two, f.config, "beta", nullptr, 1, (dir / "ablate").c_str(), nullptr), COIBA_OK)
      << coiba_last_error();
  EXPECT_TRUE(std::filesystem::exists(dir / "ablate" / "beta.csv"));
  EXPECT_EQ(coiba_ablate(f.model, two, f.config, "colour", nullptr, 1, (dir / "ablate").c_str(), nullptr),
            COIBA_ERR_CONFIG);
  coiba_dataset_free(two);
  std::filesystem::remove_all(dir);
}

TEST(CApi, CalibrationConfigNeedsCalibrationData) {
  Fixture f;
  ASSERT_EQ(coiba_config_merge(f.config, R"({"bottleneck": {"stats_mode": "calibration"}})"), COIBA_OK);
  coiba_maps* maps = nullptr;
  EXPECT_NE(coiba_attribute(f.model, f.heldout, f.config, nullptr, 1, &maps), COIBA_OK);
  EXPECT_EQ(maps, nullptr);
  ASSERT_EQ(coiba_attribute(f.model, f.heldout, f.config, f.train, 1, &maps), COIBA_OK) << coiba_last_error();
  coiba_maps_free(maps);
}

TEST(CApi, MergedDepthMovesTheDefaultLastLayer) {
  coiba_config* config = nullptr;
  ASSERT_EQ(coiba_config_default(&config), COIBA_OK);
  ASSERT_EQ(coiba_config_merge(config, R"({"model": {"depth": 3}})"), COIBA_OK) << coiba_last_error();
  char* json = nullptr;
  coiba_config_to_json(config, &json);
  EXPECT_EQ(nlohmann::json::parse(take(json))["bottleneck"]["last_layer"].get<int>(), 3);
  ASSERT_EQ(coiba_config_merge(config, R"({"bottleneck": {"last_layer": 2}})"), COIBA_OK);
  ASSERT_EQ(coiba_config_merge(config, R"({"model": {"depth": 5}})"), COIBA_OK);
  coiba_config_to_json(config, &json);
  EXPECT_EQ(nlohmann::json::parse(take(json))["bottleneck"]["last_layer"].get<int>(), 2);
  coiba_config_free(config);
}
