#pragma once

// End-to-end pipeline pieces shared by the command line tool and the
// acceptance suite: dataset and training from a RunConfig, batch attribution,
// metric evaluation, and the layer / sanity / ablation studies.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coiba/attribution.hpp"
#include "coiba/config.hpp"
#include "coiba/data_io.hpp"
#include "coiba/metrics.hpp"

namespace coiba {

struct SplitDataset {
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> heldout;
};

// Deterministic in config.seed; the held-out split is the tail.
SplitDataset make_dataset(const RunConfig& config);

TrainResult train_from_config(const RunConfig& config, const SplitDataset& data);

// Bottleneck spec with the attribution seed filled in.
BottleneckSpec attribution_spec(const RunConfig& config);

// Owns calibration stats when the config asks for them.
struct AttributionContext {
  BottleneckSpec spec;
  std::vector<LayerStats> calibration;
  UpsampleMode upsample = UpsampleMode::Bilinear;
  AttributionOptions options() const;
};

// `calibration_images` is used only in calibration stats mode (first
// config.calibration_samples entries).
AttributionContext make_context(const RunConfig& config, const ModelCheckpoint& model,
                                std::span<const SyntheticSample> calibration_images);

std::vector<AttributionMap> attribute_samples(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                              const AttributionContext& context, std::size_t jobs);

// Uniform random pixel map (the random-attribution baseline).
AttributionMap random_map(std::size_t image_size, std::uint64_t seed);

struct SampleEvaluation {
  std::string id;
  std::size_t target = 0;
  double confidence = 0.0;  // target probability on the clean image
  std::optional<InsDelResult> insdel;
  std::optional<double> road_morf;
  std::optional<double> road_lerf;
  std::optional<double> ehr;
  std::vector<SensitivityPoint> sensitivity;

  double delta_insdel() const { return insdel ? insdel->insertion.auc - insdel->deletion.auc : 0.0; }
  double delta_road() const { return road_morf && road_lerf ? *road_lerf - *road_morf : 0.0; }
};

SampleEvaluation evaluate_sample(const Scorer& scorer, const SyntheticSample& sample, const AttributionMap& map,
                                 std::size_t target, const RunConfig& config, std::size_t index);

struct EvaluationReport {
  std::vector<SampleEvaluation> samples;
  ConfidenceBinReport bins;
  std::string config_digest;
};

// Target per sample follows config.evaluation.target.
EvaluationReport evaluate_maps(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                               std::span<const AttributionMap> maps, const RunConfig& config, std::size_t jobs);
EvaluationReport evaluate_maps(const Scorer& scorer, std::span<const SyntheticSample> samples,
                               std::span<const AttributionMap> maps, std::span<const std::size_t> targets,
                               const RunConfig& config, std::size_t jobs);

std::vector<std::size_t> evaluation_targets(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                            TargetMode mode);

// id,target,confidence,ins_auc,del_auc,road_morf,road_lerf,ehr (+ sens_n... columns when present).
std::string evaluation_csv(const EvaluationReport& report);
std::string evaluation_summary_json(const EvaluationReport& report);
// Gnuplot-friendly columns: fraction insertion deletion.
std::string curve_dat(const SampleEvaluation& sample);

struct LayerComparison {
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> ssim;  // mean pairwise SSIM, layers x layers
  std::vector<std::vector<double>> delta_insdel;  // samples x layers
  std::vector<std::size_t> best_layer;    // per sample
  std::vector<std::size_t> best_counts;   // per layer
  std::optional<double> distance_spearman;  // between |l - l'| and SSIM over l < l'
};

LayerComparison compare_layers(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                               const RunConfig& config, std::span<const SyntheticSample> calibration_images,
                               std::size_t jobs);
std::string layer_comparison_csv(const LayerComparison& comparison);

struct SanityRow {
  std::optional<std::size_t> layer_index;  // nullopt: no randomization
  double mean_ssim = 0.0;
};

std::vector<SanityRow> sanity_check(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                    const RunConfig& config, std::span<const SyntheticSample> calibration_images,
                                    std::size_t jobs);
std::string sanity_csv(const std::vector<SanityRow>& rows, RandomizeMode mode);

enum class AblationAxis { Beta, Layers, UniformChannel, Readout };
AblationAxis parse_ablation_axis(const std::string& text);
std::string to_string(AblationAxis axis);

struct AblationRow {
  std::string setting;
  double beta = 0.0;
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  bool per_channel = false;
  Readout readout = Readout::FirstLayerCapacity;
  double mean_delta_insdel = 0.0;
  double accuracy = 0.0;  // argmax of the bottlenecked prediction equals the label
  std::size_t samples = 0;
};

std::vector<AblationRow> ablate(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                const RunConfig& config, AblationAxis axis,
                                std::span<const SyntheticSample> calibration_images, std::size_t jobs);
std::string ablation_csv(const std::vector<AblationRow>& rows, AblationAxis axis);

}  // namespace coiba
