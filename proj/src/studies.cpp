#include "coiba/studies.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

bool wants(const RunConfig& config, const char* metric) {
  const auto& m = config.evaluation.metrics;
  return std::find(m.begin(), m.end(), metric) != m.end();
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<std::size_t> labels_of(std::span<const SyntheticSample> samples) {
  std::vector<std::size_t> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

InsDelOptions insdel_options(const RunConfig& config) {
  return {config.evaluation.step_fraction, config.evaluation.blur_kernel, config.evaluation.blur_sigma};
}

double delta_insdel(const Scorer& scorer, const SyntheticSample& s, const AttributionMap& map,
                    const RunConfig& config) {
  const InsDelResult r = insertion_deletion(scorer, s.image, map.pixel_map, s.label, insdel_options(config));
  return r.insertion.auc - r.deletion.auc;
}

std::vector<Tensor> images_of(std::span<const SyntheticSample> samples, std::size_t limit) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < std::min(limit, samples.size()); ++i) out.push_back(samples[i].image);
  return out;
}

}  // namespace

SplitDataset make_dataset(const RunConfig& config) {
  const ModelConfig& m = config.model;
  std::vector<SyntheticSample> all = generate_dataset(config.training.samples, m.num_classes, m.image_size,
                                                      stage_seed(config, SeedStream::Dataset), m.patch_size,
                                                      m.channels);
  const auto heldout = static_cast<std::size_t>(
      std::llround(config.training.heldout_fraction * static_cast<double>(all.size())));
  SplitDataset split;
  split.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(heldout));
  split.heldout.assign(all.end() - static_cast<std::ptrdiff_t>(heldout), all.end());
  return split;
}

TrainResult train_from_config(const RunConfig& config, const SplitDataset& data) {
  TrainOptions options;
  options.epochs = config.training.epochs;
  options.learning_rate = config.training.learning_rate;
  options.batch_size = config.training.batch_size;
  options.weight_decay = config.training.weight_decay;
  options.seed = stage_seed(config, SeedStream::Shuffle);
  return train_toy(init_model(config.model), data.train, data.heldout, options);
}

BottleneckSpec attribution_spec(const RunConfig& config) {
  BottleneckSpec spec = config.bottleneck;
  spec.seed = stage_seed(config, SeedStream::Attribution);
  return spec;
}

AttributionOptions AttributionContext::options() const {
  AttributionOptions o;
  o.calibration = spec.stats_mode == StatsMode::Calibration ? &calibration : nullptr;
  o.upsample = upsample;
  return o;
}

AttributionContext make_context(const RunConfig& config, const ModelCheckpoint& model,
                                std::span<const SyntheticSample> calibration_images) {
  AttributionContext context;
  context.spec = attribution_spec(config);
  context.upsample = config.upsample;
  if (context.spec.stats_mode == StatsMode::Calibration) {
    if (calibration_images.empty()) fail(ErrorKind::Config, "calibration stats mode needs calibration images");
    const std::vector<Tensor> images = images_of(calibration_images, config.calibration_samples);
    context.calibration = calibration_stats(model, images, resolve_layers(context.spec, model.config().depth));
  }
  return context;
}

std::vector<AttributionMap> attribute_samples(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                              const AttributionContext& context, std::size_t jobs) {
  const std::vector<Tensor> images = images_of(samples, samples.size());
  const std::vector<std::size_t> targets = labels_of(samples);
  return attribute_many(model, images, targets, context.spec, jobs, context.options());
}

AttributionMap random_map(std::size_t image_size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(image_size * image_size);
  for (double& x : v) x = rng.uniform();
  AttributionMap map;
  map.pixel_map = Tensor::from_data({image_size, image_size}, std::move(v));
  map.method = "random";
  map.seed = seed;
  return map;
}

SampleEvaluation evaluate_sample(const Scorer& scorer, const SyntheticSample& sample, const AttributionMap& map,
                                 std::size_t target, const RunConfig& config, std::size_t index) {
  SampleEvaluation e;
  e.id = std::to_string(index);
  e.target = target;
  e.confidence = scorer(sample.image, target);
  const std::uint64_t seed = derive_seed(stage_seed(config, SeedStream::Evaluation), index);
  if (wants(config, "insdel")) {
    e.insdel = insertion_deletion(scorer, sample.image, map.pixel_map, target, insdel_options(config));
  }
  if (wants(config, "road")) {
    RoadOptions road_options{config.evaluation.road_fractions, config.evaluation.road_sigma, seed};
    e.road_morf = road(scorer, sample.image, map.pixel_map, target, RoadOrder::MoRF, road_options);
    e.road_lerf = road(scorer, sample.image, map.pixel_map, target, RoadOrder::LeRF, road_options);
  }
  if (wants(config, "ehr")) e.ehr = ehr(map.pixel_map, sample.mask);
  if (wants(config, "sensitivity")) {
    e.sensitivity = sensitivity_n(scorer, sample.image, map.pixel_map, target, config.evaluation.sensitivity_n,
                                  config.evaluation.sensitivity_trials, seed);
  }
  return e;
}

std::vector<std::size_t> evaluation_targets(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                            TargetMode mode) {
  std::vector<std::size_t> out;
  for (const auto& s : samples) {
    out.push_back(mode == TargetMode::GroundTruth ? s.label : argmax(predict_proba(model, s.image)[0]));
  }
  return out;
}

EvaluationReport evaluate_maps(const Scorer& scorer, std::span<const SyntheticSample> samples,
                               std::span<const AttributionMap> maps, std::span<const std::size_t> targets,
                               const RunConfig& config, std::size_t jobs) {
  if (samples.size() != maps.size() || samples.size() != targets.size()) {
    fail(ErrorKind::Contract, "one map and one target per sample required");
  }
  EvaluationReport report;
  report.samples.resize(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    report.samples[i] = evaluate_sample(scorer, samples[i], maps[i], targets[i], config, i);
  });
  std::vector<double> confidence, dinsdel, droad;
  for (const auto& s : report.samples) {
    confidence.push_back(s.confidence);
    dinsdel.push_back(s.delta_insdel());
    droad.push_back(s.delta_road());
  }
  report.bins = confidence_binned_report(confidence, dinsdel, droad, config.evaluation.bin_width);
  report.config_digest = config_digest(config);
  return report;
}

EvaluationReport evaluate_maps(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                               std::span<const AttributionMap> maps, const RunConfig& config, std::size_t jobs) {
  const std::vector<std::size_t> targets = evaluation_targets(model, samples, config.evaluation.target);
  return evaluate_maps(model_scorer(model), samples, maps, targets, config, jobs);
}

std::string evaluation_csv(const EvaluationReport& report) {
  std::string out = "id,target,confidence,ins_auc,del_auc,road_morf,road_lerf,ehr";
  const std::vector<SensitivityPoint>* sens = report.samples.empty() ? nullptr : &report.samples.front().sensitivity;
  if (sens) {
    for (const auto& p : *sens) out += ",sens_" + std::to_string(p.n);
  }
  out += "\n";
  for (const auto& s : report.samples) {
    out += s.id + "," + std::to_string(s.target) + "," + num(s.confidence) + ",";
    out += (s.insdel ? num(s.insdel->insertion.auc) : "") + "," + (s.insdel ? num(s.insdel->deletion.auc) : "");
    out += "," + num(s.road_morf) + "," + num(s.road_lerf) + "," + num(s.ehr);
    for (const auto& p : s.sensitivity) out += "," + num(p.pcc);
    out += "\n";
  }
  return out;
}

std::string evaluation_summary_json(const EvaluationReport& report) {
  nlohmann::ordered_json j;
  j["config_digest"] = report.config_digest;
  j["samples"] = report.samples.size();
  auto mean_of = [&](auto getter) -> nlohmann::json {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : report.samples) {
      if (const std::optional<double> v = getter(s)) {
        total += *v;
        ++n;
      }
    }
    return n ? nlohmann::json(total / static_cast<double>(n)) : nlohmann::json(nullptr);
  };
  j["mean"] = {
      {"confidence", mean_of([](const SampleEvaluation& s) { return std::optional<double>(s.confidence); })},
      {"ins_auc", mean_of([](const SampleEvaluation& s) {
         return s.insdel ? std::optional<double>(s.insdel->insertion.auc) : std::nullopt;
       })},
      {"del_auc", mean_of([](const SampleEvaluation& s) {
         return s.insdel ? std::optional<double>(s.insdel->deletion.auc) : std::nullopt;
       })},
      {"road_morf", mean_of([](const SampleEvaluation& s) { return s.road_morf; })},
      {"road_lerf", mean_of([](const SampleEvaluation& s) { return s.road_lerf; })},
      {"ehr", mean_of([](const SampleEvaluation& s) { return s.ehr; })},
      {"delta_insdel", report.bins.mean_delta_insdel},
      {"delta_road", report.bins.mean_delta_road},
  };
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (const auto& b : report.bins.bins) {
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"count", b.count},
                    {"delta_insdel", b.mean_delta_insdel ? nlohmann::json(*b.mean_delta_insdel) : nlohmann::json()},
                    {"delta_road", b.mean_delta_road ? nlohmann::json(*b.mean_delta_road) : nlohmann::json()}});
  }
  j["bins"] = bins;
  if (!report.samples.empty() && !report.samples.front().sensitivity.empty()) {
    nlohmann::ordered_json sens = nlohmann::ordered_json::array();
    const std::size_t points = report.samples.front().sensitivity.size();
    for (std::size_t k = 0; k < points; ++k) {
      double total = 0.0;
      std::size_t n = 0;
      for (const auto& s : report.samples) {
        if (s.sensitivity[k].pcc) {
          total += *s.sensitivity[k].pcc;
          ++n;
        }
      }
      sens.push_back({{"n", report.samples.front().sensitivity[k].n},
                      {"mean_pcc", n ? nlohmann::json(total / static_cast<double>(n)) : nlohmann::json()},
                      {"defined", n}});
    }
    j["sensitivity"] = sens;
  }
  return j.dump(2) + "\n";
}

std::string curve_dat(const SampleEvaluation& sample) {
  std::string out = "# fraction insertion deletion\n";
  if (!sample.insdel) return out;
  const auto& ins = sample.insdel->insertion;
  const auto& del = sample.insdel->deletion;
  for (std::size_t i = 0; i < ins.fractions.size(); ++i) {
    out += num(ins.fractions[i]) + " " + num(ins.scores[i]) + " " + num(del.scores[i]) + "\n";
  }
  return out;
}

LayerComparison compare_layers(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                               const RunConfig& config, std::span<const SyntheticSample> calibration_images,
                               std::size_t jobs) {
  const std::size_t depth = model.config().depth;
  const BottleneckSpec base = attribution_spec(config);
  std::vector<LayerStats> all_stats;
  if (base.stats_mode == StatsMode::Calibration) {
    all_stats = calibration_stats(model, images_of(calibration_images, config.calibration_samples), {1, depth});
  }
  const Scorer scorer = model_scorer(model);

  LayerComparison out;
  for (std::size_t l = 1; l <= depth; ++l) out.layers.push_back(l);
  // maps[sample][layer]
  std::vector<std::vector<AttributionMap>> maps(samples.size(), std::vector<AttributionMap>(depth));
  out.delta_insdel.assign(samples.size(), std::vector<double>(depth, 0.0));
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    BottleneckSpec spec = base;
    spec.seed = derive_seed(base.seed, i);
    for (std::size_t l = 1; l <= depth; ++l) {
      std::vector<LayerStats> stats;
      AttributionOptions options;
      options.upsample = config.upsample;
      if (!all_stats.empty()) {
        stats = {all_stats[l - 1]};
        options.calibration = &stats;
      }
      maps[i][l - 1] = attribute_iba(model, samples[i].image, samples[i].label, l, spec.beta, spec, options);
      out.delta_insdel[i][l - 1] = delta_insdel(scorer, samples[i], maps[i][l - 1], config);
    }
  });

  out.ssim.assign(depth, std::vector<double>(depth, 0.0));
  for (std::size_t a = 0; a < depth; ++a) {
    out.ssim[a][a] = 1.0;
    for (std::size_t b = a + 1; b < depth; ++b) {
      double total = 0.0;
      for (std::size_t i = 0; i < samples.size(); ++i) total += map_ssim(maps[i][a].pixel_map, maps[i][b].pixel_map);
      out.ssim[a][b] = out.ssim[b][a] = samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
    }
  }
  std::vector<double> distance, similarity;
  for (std::size_t a = 0; a < depth; ++a) {
    for (std::size_t b = a + 1; b < depth; ++b) {
      distance.push_back(static_cast<double>(b - a));
      similarity.push_back(out.ssim[a][b]);
    }
  }
  out.distance_spearman = spearman(distance, similarity);

  out.best_counts.assign(depth, 0);
  for (const auto& row : out.delta_insdel) {
    const std::size_t best = argmax(row);
    out.best_layer.push_back(best + 1);
    ++out.best_counts[best];
  }
  return out;
}

std::string layer_comparison_csv(const LayerComparison& c) {
  std::string out = "layer";
  for (std::size_t l : c.layers) out += ",ssim_l" + std::to_string(l);
  out += ",best_count\n";
  for (std::size_t a = 0; a < c.layers.size(); ++a) {
    out += std::to_string(c.layers[a]);
    for (double v : c.ssim[a]) out += "," + num(v);
    out += "," + std::to_string(c.best_counts[a]) + "\n";
  }
  return out;
}

std::vector<SanityRow> sanity_check(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                    const RunConfig& config, std::span<const SyntheticSample> calibration_images,
                                    std::size_t jobs) {
  const std::size_t depth = model.config().depth;
  const RandomizeMode mode = config.studies.sanity_mode;
  std::vector<std::size_t> indices = config.studies.sanity_layers;
  if (indices.empty()) {
    const std::size_t limit = mode == RandomizeMode::Cumulative ? depth : depth - 1;
    for (std::size_t k = 0; k <= limit; ++k) indices.push_back(k);
  }
  const AttributionContext context = make_context(config, model, calibration_images);
  const std::vector<AttributionMap> original = attribute_samples(model, samples, context, jobs);

  auto mean_ssim = [&](const ModelCheckpoint& variant) {
    const AttributionContext ctx = make_context(config, variant, calibration_images);
    const std::vector<AttributionMap> maps = attribute_samples(variant, samples, ctx, jobs);
    double total = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) total += map_ssim(original[i].pixel_map, maps[i].pixel_map);
    return maps.empty() ? 0.0 : total / static_cast<double>(maps.size());
  };

  std::vector<SanityRow> rows;
  rows.push_back({std::nullopt, mean_ssim(model)});
  for (std::size_t k : indices) {
    const ModelCheckpoint randomized =
        randomize_parameters(model, mode, k, derive_seed(stage_seed(config, SeedStream::Randomize), k));
    rows.push_back({k, mean_ssim(randomized)});
  }
  return rows;
}

std::string sanity_csv(const std::vector<SanityRow>& rows, RandomizeMode mode) {
  std::string out = "mode,layer_index,mean_ssim\n";
  for (const auto& r : rows) {
    out += (r.layer_index ? to_string(mode) : std::string("none")) + "," +
           (r.layer_index ? std::to_string(*r.layer_index) : std::string()) + "," + num(r.mean_ssim) + "\n";
  }
  return out;
}

AblationAxis parse_ablation_axis(const std::string& text) {
  if (text == "beta") return AblationAxis::Beta;
  if (text == "layers") return AblationAxis::Layers;
  if (text == "uniform-channel") return AblationAxis::UniformChannel;
  if (text == "readout") return AblationAxis::Readout;
  fail(ErrorKind::Config, "unknown ablation axis \"" + text + "\" (beta|layers|uniform-channel|readout)");
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::Beta: return "beta";
    case AblationAxis::Layers: return "layers";
    case AblationAxis::UniformChannel: return "uniform-channel";
    case AblationAxis::Readout: return "readout";
  }
  return "unknown";
}

std::vector<AblationRow> ablate(const ModelCheckpoint& model, std::span<const SyntheticSample> samples,
                                const RunConfig& config, AblationAxis axis,
                                std::span<const SyntheticSample> calibration_images, std::size_t jobs) {
  const std::size_t depth = model.config().depth;
  std::vector<std::pair<std::string, RunConfig>> settings;
  auto add = [&](std::string label, auto edit) {
    RunConfig c = config;
    c.bottleneck.mode = BottleneckMode::Coiba;
    edit(c.bottleneck);
    settings.emplace_back(std::move(label), std::move(c));
  };
  switch (axis) {
    case AblationAxis::Beta:
      for (double beta : config.studies.beta_values) add("beta=" + num(beta), [&](BottleneckSpec& s) { s.beta = beta; });
      break;
    case AblationAxis::Layers:
      for (std::size_t first = 1; first <= depth; ++first) {
        add("s=" + std::to_string(first) + ",e=" + std::to_string(depth), [&](BottleneckSpec& s) {
          s.first_layer = first;
          s.last_layer = depth;
        });
      }
      for (std::size_t last = 1; last < depth; ++last) {
        add("s=1,e=" + std::to_string(last), [&](BottleneckSpec& s) {
          s.first_layer = 1;
          s.last_layer = last;
        });
      }
      break;
    case AblationAxis::UniformChannel:
      add("uniform", [](BottleneckSpec& s) { s.per_channel = false; });
      add("per-channel", [](BottleneckSpec& s) { s.per_channel = true; });
      break;
    case AblationAxis::Readout:
      for (Readout r : {Readout::CapacityMean, Readout::FirstLayerCapacity, Readout::Lambda}) {
        add(to_string(r), [&](BottleneckSpec& s) { s.readout = r; });
      }
      break;
  }

  const Scorer scorer = model_scorer(model);
  std::vector<AblationRow> rows;
  for (const auto& [label, c] : settings) {
    const AttributionContext context = make_context(c, model, calibration_images);
    const std::vector<AttributionMap> maps = attribute_samples(model, samples, context, jobs);
    std::vector<double> deltas(samples.size(), 0.0);
    parallel_for(samples.size(), jobs, [&](std::size_t i) { deltas[i] = delta_insdel(scorer, samples[i], maps[i], c); });
    AblationRow row;
    row.setting = label;
    row.beta = c.bottleneck.beta;
    const LayerRange range = resolve_layers(c.bottleneck, depth);
    row.first_layer = range.first;
    row.last_layer = range.last;
    row.per_channel = c.bottleneck.per_channel;
    row.readout = c.bottleneck.readout;
    row.samples = samples.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      row.mean_delta_insdel += deltas[i];
      if (argmax(maps[i].bottleneck_probs) == samples[i].label) ++correct;
    }
    if (!samples.empty()) {
      row.mean_delta_insdel /= static_cast<double>(samples.size());
      row.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    }
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, AblationAxis axis) {
  std::string out = "axis,setting,beta,first_layer,last_layer,per_channel,readout,mean_delta_insdel,accuracy,samples\n";
  for (const auto& r : rows) {
    out += to_string(axis) + "," + "\"" + r.setting + "\"," + num(r.beta) + "," + std::to_string(r.first_layer) + "," +
           std::to_string(r.last_layer) + "," + (r.per_channel ? "true" : "false") + "," + to_string(r.readout) + "," +
           num(r.mean_delta_insdel) + "," + num(r.accuracy) + "," + std::to_string(r.samples) + "\n";
  }
  return out;
}

}  // namespace coiba
