#pragma once

// Run configuration: one JSON document covering model, bottleneck,
// training, evaluation and study settings. Unknown keys are rejected and
// every problem is reported in a single Config error.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coiba/attribution.hpp"
#include "coiba/bottleneck.hpp"
#include "coiba/vit.hpp"

namespace coiba {

struct TrainingConfig {
  std::size_t samples = 2000;
  double heldout_fraction = 0.2;
  std::size_t epochs = 12;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
};

enum class TargetMode { GroundTruth, Predicted };

struct EvaluationConfig {
  std::size_t samples = 200;
  double step_fraction = 0.035;
  std::size_t blur_kernel = 11;
  double blur_sigma = 10.0;
  std::vector<double> road_fractions{0.2, 0.4, 0.6, 0.8};
  double road_sigma = 0.01;
  double bin_width = 0.2;
  TargetMode target = TargetMode::GroundTruth;
  std::vector<std::string> metrics{"insdel", "road", "ehr"};
  std::vector<std::size_t> sensitivity_n{1, 10, 100, 400, 819};
  std::size_t sensitivity_trials = 100;
  bool curves = false;
};

struct StudyConfig {
  std::vector<double> beta_values{0.01, 0.1, 1.0, 10.0, 100.0};
  RandomizeMode sanity_mode = RandomizeMode::Cumulative;
  std::vector<std::size_t> sanity_layers;  // empty: 0..depth
  std::size_t samples = 50;
};

struct PathsConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;  // manifest.csv
  std::filesystem::path maps;     // directory of attribution sidecars
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  BottleneckSpec bottleneck;
  std::size_t calibration_samples = 32;
  UpsampleMode upsample = UpsampleMode::Bilinear;
  TrainingConfig training;
  EvaluationConfig evaluation;
  StudyConfig studies;
  PathsConfig paths;
};

// Defaults with the bottleneck layer range resolved against the model depth.
RunConfig default_config();

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

// Checks cross-field invariants; throws Config listing every violation.
void validate_config(const RunConfig& config);

// Canonical JSON (all fields, resolved layers).
std::string run_config_to_json(const RunConfig& config);
std::string config_digest(const RunConfig& config);

std::string to_string(TargetMode mode);
std::string to_string(RandomizeMode mode);
std::string to_string(UpsampleMode mode);

// Sub-seeds for the pipeline stages.
enum class SeedStream : std::uint64_t { Model = 1, Dataset = 2, Shuffle = 3, Attribution = 4, Evaluation = 5, Randomize = 6 };
std::uint64_t stage_seed(const RunConfig& config, SeedStream stream);

}  // namespace coiba
