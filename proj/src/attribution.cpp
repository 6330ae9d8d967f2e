#include "coiba/attribution.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "coiba/adam.hpp"
#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

constexpr std::uint64_t kTrainNoiseStream = 0x7A11;
constexpr std::uint64_t kEvalNoiseStream = 0xE7A1;

struct Setup {
  LayerRange range;
  Tensor start_tokens;  // residual entering the first hooked block, [1, T, d]
  std::vector<LayerStats> stats;
  std::size_t perturbed = 0;
  std::size_t patches = 0;
  std::size_t dim = 0;
  Shape alpha_shape;
};

Tensor patch_rows(const Tensor& residual, std::size_t patches) {
  const std::size_t tokens = residual.size(-2);
  return reshape(slice(residual, -2, tokens - patches, patches), {patches, residual.size(-1)});
}

Setup prepare(const ModelCheckpoint& model, const Tensor& image, const BottleneckSpec& spec,
              LayerRange range, const AttributionOptions& options) {
  const ModelConfig& c = model.config();
  Setup s;
  s.range = range;
  s.patches = c.num_patches();
  s.dim = c.embed_dim;
  s.perturbed = spec.include_class_token ? c.num_tokens() : c.num_patches();
  s.alpha_shape = spec.per_channel ? Shape{s.perturbed, s.dim} : Shape{s.perturbed};
  const std::vector<Tensor> inputs = block_inputs(model, image);
  s.start_tokens = inputs.at(range.first - 1);
  if (spec.stats_mode == StatsMode::Calibration) {
    if (!options.calibration || options.calibration->size() != range.count()) {
      fail(ErrorKind::Config, "calibration stats mode needs one LayerStats per hooked layer");
    }
    s.stats = *options.calibration;
  } else {
    for (std::size_t layer = range.first; layer <= range.last; ++layer) {
      s.stats.push_back(estimate_stats(patch_rows(inputs[layer - 1], s.patches)));
    }
  }
  return s;
}

struct LossParts {
  Tensor total;
  double cross_entropy = 0.0;
  double compression = 0.0;
  Tensor logits;
};

LossParts objective(const ModelCheckpoint& model, const Setup& setup, const BottleneckSpec& spec,
                    const DampingParams& damping, BottleneckHookSet& hooks, std::size_t target) {
  const Tensor logits = forward_from(model, setup.start_tokens, setup.range.first,
                                     [&hooks](std::size_t layer, const Tensor& x) { return hooks(layer, x); });
  const std::vector<std::size_t> targets(logits.size(0), target);
  const Tensor ce = cross_entropy(logits, targets);
  const Tensor comp = compression_term(hooks.trace(), spec, setup.range, damping, setup.stats);
  const double weight = spec.mode == BottleneckMode::CoibaPerLayerBeta ? 1.0 : spec.beta;
  return LossParts{ce + scale(comp, weight), ce.item(), comp.item(), logits};
}

std::vector<double> mean_probabilities(const Tensor& logits) {
  const Tensor probs = softmax(logits.detach(), -1);
  const std::size_t rows = probs.size(0);
  const std::size_t classes = probs.size(1);
  std::vector<double> out(classes, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < classes; ++c) out[c] += probs.data()[r * classes + c];
  }
  for (double& v : out) v /= static_cast<double>(rows);
  return out;
}

void check_target(const ModelCheckpoint& model, std::size_t target) {
  if (target >= model.config().num_classes) {
    fail(ErrorKind::Index, "target class " + std::to_string(target) + " out of range for " +
                               std::to_string(model.config().num_classes) + " classes");
  }
}

struct Readout {
  ObjectiveValue objective;
  std::vector<double> token_scores;
  std::vector<double> lambda;
  std::vector<double> layer_capacity;
};

Readout read_out(const ModelCheckpoint& model, const Setup& setup, const BottleneckSpec& spec,
                 const DampingParams& damping, std::size_t target) {
  Rng rng(derive_seed(spec.seed, kEvalNoiseStream));
  const auto noise = draw_standard_noise(rng, setup.range.count(), spec.noise_batch, setup.perturbed, setup.dim);
  BottleneckHookSet hooks(setup.range, damping, setup.stats, spec.noise_batch);
  hooks.frozen_noise(noise);
  const LossParts parts = objective(model, setup, spec, damping, hooks, target);

  Readout out;
  out.objective.cross_entropy = parts.cross_entropy;
  out.objective.compression = parts.compression;
  out.objective.total = parts.total.item();
  out.objective.probs = mean_probabilities(parts.logits);

  const std::size_t offset = setup.perturbed - setup.patches;
  const Tensor lambda = damping.lambda();
  out.lambda.assign(setup.patches, 0.0);
  const std::size_t width = spec.per_channel ? setup.dim : 1;
  for (std::size_t p = 0; p < setup.patches; ++p) {
    for (std::size_t j = 0; j < width; ++j) out.lambda[p] += lambda.data()[(p + offset) * width + j];
    out.lambda[p] /= static_cast<double>(width);
  }

  const std::size_t last = spec.readout == coiba::Readout::FirstLayerCapacity ? setup.range.first : setup.range.last;
  std::vector<double> capacity(setup.patches, 0.0);
  std::size_t layers = 0;
  for (const TraceEntry& entry : hooks.trace().layers) {
    const Tensor cap = kl_capacity(entry.r_prime, damping, setup.stats[entry.stats_index]);
    const std::size_t batch = cap.numel() / (setup.perturbed * setup.dim);
    const auto v = cap.data();
    std::vector<double> per_token(setup.patches, 0.0);
    double layer_total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t p = 0; p < setup.patches; ++p) {
        const std::size_t row = (b * setup.perturbed + p + offset) * setup.dim;
        double total = 0.0;
        for (std::size_t j = 0; j < setup.dim; ++j) total += v[row + j];
        per_token[p] += total / static_cast<double>(batch);
        layer_total += total;
      }
    }
    out.layer_capacity.push_back(layer_total / static_cast<double>(batch * setup.patches * setup.dim));
    if (entry.layer > last) continue;
    for (std::size_t p = 0; p < setup.patches; ++p) capacity[p] += per_token[p];
    ++layers;
  }

  if (spec.readout == coiba::Readout::Lambda) {
    out.token_scores = out.lambda;
    return out;
  }
  out.token_scores = std::move(capacity);
  for (double& s : out.token_scores) {
    s = std::max(0.0, s / static_cast<double>(layers) / std::numbers::ln2);
  }
  return out;
}

AttributionMap fit(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                   const BottleneckSpec& spec, const std::string& method, const AttributionOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  check_target(model, target);
  validate_spec(spec, model.config().depth);
  const LayerRange range = resolve_layers(spec, model.config().depth);
  const Setup setup = prepare(model, image, spec, range, options);

  DampingParams damping = DampingParams::constant(setup.alpha_shape, spec.init_alpha, true);
  AdamState adam;
  adam.learning_rate = spec.learning_rate;
  Rng noise(derive_seed(spec.seed, kTrainNoiseStream));
  for (std::size_t it = 0; it < spec.iterations; ++it) {
    BottleneckHookSet hooks(range, damping, setup.stats, spec.noise_batch);
    hooks.fresh_noise(noise);
    const LossParts parts = objective(model, setup, spec, damping, hooks, target);
    if (!std::isfinite(parts.total.item())) {
      fail(ErrorKind::Optimization, "non-finite loss at iteration " + std::to_string(it));
    }
    parts.total.backward();
    try {
      adam_step(adam, damping.alpha.mutable_data(), damping.alpha.grad());
    } catch (const Error& e) {
      fail(ErrorKind::Optimization, "iteration " + std::to_string(it) + ": " + e.what());
    }
    damping.alpha.zero_grad();
  }

  const DampingParams fitted{damping.alpha.detach()};
  const Readout readout = read_out(model, setup, spec, fitted, target);

  AttributionMap map;
  map.token_scores = readout.token_scores;
  map.pixel_map = upsample_scores(map.token_scores, model.config().image_size, options.upsample);
  map.method = method;
  map.first_layer = range.first;
  map.last_layer = range.last;
  map.beta = spec.beta;
  map.seed = spec.seed;
  map.iterations = spec.iterations;
  map.loss_ce = readout.objective.cross_entropy;
  map.loss_compression = readout.objective.compression;
  map.lambda = readout.lambda;
  map.bottleneck_probs = readout.objective.probs;
  map.layer_capacity = readout.layer_capacity;
  map.runtime_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return map;
}

}  // namespace

bool upper_bound_holds(const AttributionMap& map) {
  if (map.layer_capacity.empty()) return true;
  double mean = 0.0;
  for (double c : map.layer_capacity) mean += c;
  mean /= static_cast<double>(map.layer_capacity.size());
  return map.layer_capacity.front() >= mean;
}

Tensor upsample_scores(std::span<const double> token_scores, std::size_t image_size, UpsampleMode mode) {
  const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(token_scores.size()))));
  if (token_scores.empty() || grid * grid != token_scores.size()) {
    fail(ErrorKind::Config, "token count " + std::to_string(token_scores.size()) + " is not a perfect square");
  }
  if (image_size == 0 || image_size % grid != 0) {
    fail(ErrorKind::Config, "image size must be a positive multiple of the token grid");
  }
  const double cell = static_cast<double>(image_size) / static_cast<double>(grid);
  std::vector<double> out(image_size * image_size);
  auto at = [&](std::size_t gy, std::size_t gx) { return token_scores[gy * grid + gx]; };
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      if (mode == UpsampleMode::Nearest) {
        out[y * image_size + x] = at(static_cast<std::size_t>(y / cell), static_cast<std::size_t>(x / cell));
        continue;
      }
      const double sy = std::clamp((static_cast<double>(y) + 0.5) / cell - 0.5, 0.0, static_cast<double>(grid - 1));
      const double sx = std::clamp((static_cast<double>(x) + 0.5) / cell - 0.5, 0.0, static_cast<double>(grid - 1));
      const auto y0 = static_cast<std::size_t>(sy);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, grid - 1);
      const std::size_t x1 = std::min(x0 + 1, grid - 1);
      const double fy = sy - static_cast<double>(y0);
      const double fx = sx - static_cast<double>(x0);
      const double top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
      const double bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
      out[y * image_size + x] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return Tensor::from_data({image_size, image_size}, std::move(out));
}

std::vector<LayerStats> calibration_stats(const ModelCheckpoint& model, std::span<const Tensor> images,
                                          LayerRange range) {
  const std::size_t patches = model.config().num_patches();
  std::vector<std::vector<Tensor>> rows(range.count());
  for (const Tensor& image : images) {
    const std::vector<Tensor> inputs = block_inputs(model, image);
    for (std::size_t layer = range.first; layer <= range.last; ++layer) {
      rows[layer - range.first].push_back(patch_rows(inputs.at(layer - 1), patches));
    }
  }
  std::vector<LayerStats> out;
  for (const auto& layer_rows : rows) out.push_back(estimate_stats(std::span<const Tensor>(layer_rows)));
  return out;
}

AttributionMap attribute_coiba(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                               const BottleneckSpec& spec, const AttributionOptions& options) {
  if (spec.mode != BottleneckMode::Coiba && spec.mode != BottleneckMode::CoibaPerLayerBeta) {
    fail(ErrorKind::Config, "attribute_coiba needs mode coiba or coiba_per_layer_beta");
  }
  return fit(model, image, target, spec, to_string(spec.mode), options);
}

AttributionMap attribute_iba(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                             std::size_t layer, double beta, const BottleneckSpec& base,
                             const AttributionOptions& options) {
  BottleneckSpec spec = base;
  spec.mode = BottleneckMode::Iba;
  spec.first_layer = layer;
  spec.last_layer = layer;
  spec.beta = beta;
  spec.layer_betas.clear();
  spec.layer_weights.clear();
  return fit(model, image, target, spec, "iba", options);
}

AttributionMap attribute_iba_star(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                  const BottleneckSpec& spec, const AttributionOptions& options) {
  validate_spec(spec, model.config().depth);
  const LayerRange range = resolve_layers(spec, model.config().depth);
  std::vector<double> weights = spec.layer_weights;
  if (weights.empty()) weights.assign(range.count(), 1.0 / static_cast<double>(range.count()));
  if (weights.size() != range.count()) fail(ErrorKind::Config, "layer_weights length must match the layer range");

  AttributionMap out;
  out.token_scores.assign(model.config().num_patches(), 0.0);
  out.lambda.assign(model.config().num_patches(), 0.0);
  out.bottleneck_probs.assign(model.config().num_classes, 0.0);
  for (std::size_t layer = range.first; layer <= range.last; ++layer) {
    const double w = weights[layer - range.first];
    const AttributionMap single = attribute_iba(model, image, target, layer, spec.beta, spec, options);
    for (std::size_t p = 0; p < out.token_scores.size(); ++p) {
      out.token_scores[p] += w * single.token_scores[p];
      out.lambda[p] += w * single.lambda[p];
    }
    for (std::size_t c = 0; c < out.bottleneck_probs.size(); ++c) {
      out.bottleneck_probs[c] += w * single.bottleneck_probs[c];
    }
    out.loss_ce += w * single.loss_ce;
    out.loss_compression += w * single.loss_compression;
    out.runtime_ms += single.runtime_ms;
    out.layer_capacity.push_back(single.layer_capacity.front());
  }
  out.pixel_map = upsample_scores(out.token_scores, model.config().image_size, options.upsample);
  out.method = "iba_star";
  out.first_layer = range.first;
  out.last_layer = range.last;
  out.beta = spec.beta;
  out.seed = spec.seed;
  out.iterations = spec.iterations;
  return out;
}

AttributionMap attribute(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                         const BottleneckSpec& spec, const AttributionOptions& options) {
  switch (spec.mode) {
    case BottleneckMode::Iba: {
      const LayerRange range = resolve_layers(spec, model.config().depth);
      return attribute_iba(model, image, target, range.first, spec.beta, spec, options);
    }
    case BottleneckMode::IbaStar:
      return attribute_iba_star(model, image, target, spec, options);
    case BottleneckMode::Coiba:
    case BottleneckMode::CoibaPerLayerBeta:
      return attribute_coiba(model, image, target, spec, options);
  }
  fail(ErrorKind::Config, "unknown bottleneck mode");
}

ObjectiveValue evaluate_objective(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                  const BottleneckSpec& spec, const DampingParams& damping,
                                  const AttributionOptions& options) {
  check_target(model, target);
  validate_spec(spec, model.config().depth);
  const LayerRange range = resolve_layers(spec, model.config().depth);
  const Setup setup = prepare(model, image, spec, range, options);
  if (damping.alpha.shape() != setup.alpha_shape) {
    fail(ErrorKind::Dimension, "damping shape " + shape_string(damping.alpha.shape()) + " expected " +
                                   shape_string(setup.alpha_shape));
  }
  const DampingParams frozen{damping.alpha.detach()};
  return read_out(model, setup, spec, frozen, target).objective;
}

ObjectiveGradient objective_gradient(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                     const BottleneckSpec& spec, const std::vector<double>& alpha,
                                     const AttributionOptions& options) {
  check_target(model, target);
  validate_spec(spec, model.config().depth);
  const LayerRange range = resolve_layers(spec, model.config().depth);
  const Setup setup = prepare(model, image, spec, range, options);
  DampingParams damping{Tensor::from_data(setup.alpha_shape, alpha, true)};
  Rng noise(derive_seed(spec.seed, kTrainNoiseStream));
  BottleneckHookSet hooks(range, damping, setup.stats, spec.noise_batch);
  hooks.fresh_noise(noise);
  const LossParts parts = objective(model, setup, spec, damping, hooks, target);
  parts.total.backward();
  return ObjectiveGradient{parts.total.item(),
                           std::vector<double>(damping.alpha.grad().begin(), damping.alpha.grad().end())};
}

std::vector<AttributionMap> attribute_many(const ModelCheckpoint& model, std::span<const Tensor> images,
                                           std::span<const std::size_t> targets, const BottleneckSpec& spec,
                                           std::size_t jobs, const AttributionOptions& options) {
  if (images.size() != targets.size()) fail(ErrorKind::Contract, "one target per image required");
  std::vector<AttributionMap> out(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    BottleneckSpec job = spec;
    job.seed = derive_seed(spec.seed, i);
    out[i] = attribute(model, images[i], targets[i], job, options);
  });
  return out;
}

std::string attribution_sidecar_json(const AttributionMap& map) {
  nlohmann::ordered_json j;
  j["method"] = map.method;
  j["layers"] = {map.first_layer, map.last_layer};
  j["beta"] = map.beta;
  j["iterations"] = map.iterations;
  j["seed"] = map.seed;
  j["token_scores"] = map.token_scores;
  j["lambda"] = map.lambda;
  j["bottleneck_probs"] = map.bottleneck_probs;
  j["layer_capacity"] = map.layer_capacity;
  j["loss_ce"] = map.loss_ce;
  j["loss_compression"] = map.loss_compression;
  j["runtime_ms"] = map.runtime_ms;
  return j.dump(2) + "\n";
}

void save_attribution(const AttributionMap& map, const std::filesystem::path& pgm_path,
                      const std::filesystem::path& json_path) {
  const auto values = map.pixel_map.data();
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::vector<double> normalized(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    normalized[i] = range > 0.0 ? (values[i] - *lo) / range : 0.0;
  }
  save_pgm(pgm_path, Tensor::from_data(map.pixel_map.shape(), std::move(normalized)), 16);
  write_file_atomic(json_path, attribution_sidecar_json(map));
}

AttributionMap load_attribution_sidecar(const std::filesystem::path& json_path, std::size_t image_size,
                                        UpsampleMode mode) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(json_path));
    AttributionMap map;
    map.method = j.at("method").get<std::string>();
    map.first_layer = j.at("layers").at(0).get<std::size_t>();
    map.last_layer = j.at("layers").at(1).get<std::size_t>();
    map.beta = j.at("beta").get<double>();
    map.iterations = j.at("iterations").get<std::size_t>();
    map.seed = j.at("seed").get<std::uint64_t>();
    map.token_scores = j.at("token_scores").get<std::vector<double>>();
    map.lambda = j.value("lambda", std::vector<double>{});
    map.bottleneck_probs = j.value("bottleneck_probs", std::vector<double>{});
    map.layer_capacity = j.value("layer_capacity", std::vector<double>{});
    map.loss_ce = j.at("loss_ce").get<double>();
    map.loss_compression = j.at("loss_compression").get<double>();
    map.runtime_ms = j.value("runtime_ms", 0.0);
    map.pixel_map = upsample_scores(map.token_scores, image_size, mode);
    return map;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, "attribution sidecar '" + json_path.string() + "': " + e.what());
  }
}

}  // namespace coiba
