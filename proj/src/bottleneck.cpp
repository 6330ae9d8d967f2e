#include "coiba/bottleneck.hpp"

#include <algorithm>
#include <cmath>

#include "coiba/errors.hpp"

namespace coiba {

std::string to_string(BottleneckMode mode) {
  switch (mode) {
    case BottleneckMode::Iba: return "iba";
    case BottleneckMode::IbaStar: return "iba_star";
    case BottleneckMode::Coiba: return "coiba";
    case BottleneckMode::CoibaPerLayerBeta: return "coiba_per_layer_beta";
  }
  return "unknown";
}

std::string to_string(StatsMode mode) {
  return mode == StatsMode::PerSample ? "per_sample" : "calibration";
}

std::string to_string(Readout readout) {
  switch (readout) {
    case Readout::CapacityMean: return "capacity_mean";
    case Readout::FirstLayerCapacity: return "first_layer_capacity";
    case Readout::Lambda: return "lambda";
  }
  return "unknown";
}

BottleneckMode parse_bottleneck_mode(const std::string& text) {
  if (text == "iba") return BottleneckMode::Iba;
  if (text == "iba_star" || text == "iba-star") return BottleneckMode::IbaStar;
  if (text == "coiba") return BottleneckMode::Coiba;
  if (text == "coiba_per_layer_beta") return BottleneckMode::CoibaPerLayerBeta;
  fail(ErrorKind::Config, "unknown bottleneck mode '" + text + "'");
}

StatsMode parse_stats_mode(const std::string& text) {
  if (text == "per_sample") return StatsMode::PerSample;
  if (text == "calibration") return StatsMode::Calibration;
  fail(ErrorKind::Config, "unknown stats mode '" + text + "'");
}

Readout parse_readout(const std::string& text) {
  if (text == "capacity_mean") return Readout::CapacityMean;
  if (text == "first_layer_capacity") return Readout::FirstLayerCapacity;
  if (text == "lambda") return Readout::Lambda;
  fail(ErrorKind::Config, "unknown readout '" + text + "'");
}

LayerRange resolve_layers(const BottleneckSpec& spec, std::size_t depth) {
  LayerRange range;
  range.first = spec.first_layer != 0 ? spec.first_layer : 1;
  range.last = spec.last_layer != 0 ? spec.last_layer : depth;
  if (spec.first_layer != 0 && spec.last_layer == 0 && range.first > depth) range.last = range.first;
  return range;
}

void validate_spec(const BottleneckSpec& spec, std::size_t depth) {
  std::vector<std::string> problems;
  const LayerRange range = resolve_layers(spec, depth);
  if (range.first < 1) problems.push_back("first_layer must be >= 1");
  if (range.first > range.last) {
    problems.push_back("first_layer (" + std::to_string(range.first) +
                       ") must not exceed last_layer (" + std::to_string(range.last) + ")");
  }
  if (range.last > depth) {
    problems.push_back("last_layer (" + std::to_string(range.last) + ") exceeds model depth " +
                       std::to_string(depth));
  }
  if (spec.mode == BottleneckMode::Iba && range.first != range.last) {
    problems.push_back("iba mode needs first_layer == last_layer");
  }
  if (!(spec.beta >= 0.0) || !std::isfinite(spec.beta)) problems.push_back("beta must be finite and >= 0");
  if (spec.mode == BottleneckMode::CoibaPerLayerBeta && range.first <= range.last &&
      spec.layer_betas.size() != range.count()) {
    problems.push_back("layer_betas needs " + std::to_string(range.count()) + " entries, got " +
                       std::to_string(spec.layer_betas.size()));
  }
  for (double b : spec.layer_betas) {
    if (!(b >= 0.0) || !std::isfinite(b)) {
      problems.push_back("layer_betas entries must be finite and >= 0");
      break;
    }
  }
  if (!spec.layer_weights.empty()) {
    double total = 0.0;
    bool negative = false;
    for (double w : spec.layer_weights) {
      negative = negative || !(w >= 0.0);
      total += w;
    }
    if (range.first <= range.last && spec.layer_weights.size() != range.count()) {
      problems.push_back("layer_weights needs " + std::to_string(range.count()) + " entries");
    }
    if (negative) problems.push_back("layer_weights must be non-negative");
    if (std::abs(total - 1.0) > 1e-9) problems.push_back("layer_weights must sum to 1");
  }
  if (spec.iterations < 1) problems.push_back("iterations must be >= 1");
  if (spec.noise_batch < 1) problems.push_back("noise_batch must be >= 1");
  if (!(spec.learning_rate > 0.0)) problems.push_back("learning_rate must be > 0");
  if (!std::isfinite(spec.init_alpha)) problems.push_back("init_alpha must be finite");
  if (!problems.empty()) {
    std::string message = "invalid bottleneck spec: ";
    for (std::size_t i = 0; i < problems.size(); ++i) {
      if (i) message += "; ";
      message += problems[i];
    }
    fail(ErrorKind::Config, message);
  }
}

namespace {

LayerStats stats_from_rows(const std::vector<const Tensor*>& blocks, StatsMode mode) {
  const std::size_t d = blocks.front()->shape().back();
  std::vector<double> mu(d, 0.0);
  std::vector<double> var(d, 0.0);
  std::size_t rows = 0;
  for (const Tensor* t : blocks) {
    if (t->rank() != 2 || t->shape()[1] != d) {
      fail(ErrorKind::Dimension, "stats expect [tokens, " + std::to_string(d) + "] activations, got " +
                                     shape_string(t->shape()));
    }
    const auto v = t->data();
    for (std::size_t r = 0; r < t->shape()[0]; ++r) {
      for (std::size_t j = 0; j < d; ++j) mu[j] += v[r * d + j];
    }
    rows += t->shape()[0];
  }
  for (double& m : mu) m /= static_cast<double>(rows);
  for (const Tensor* t : blocks) {
    const auto v = t->data();
    for (std::size_t r = 0; r < t->shape()[0]; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = v[r * d + j] - mu[j];
        var[j] += diff * diff;
      }
    }
  }
  std::vector<double> sd(d);
  for (std::size_t j = 0; j < d; ++j) {
    sd[j] = std::max(std::sqrt(var[j] / static_cast<double>(rows)), kStdFloor);
  }
  return LayerStats{Tensor::from_data({d}, std::move(mu)), Tensor::from_data({d}, std::move(sd)),
                    mode};
}

}  // namespace

LayerStats estimate_stats(const Tensor& activations) {
  if (activations.rank() != 2) {
    fail(ErrorKind::Dimension, "estimate_stats expects [tokens, d], got " +
                                   shape_string(activations.shape()));
  }
  if (activations.shape()[0] < 2) {
    fail(ErrorKind::Stats, "per-sample statistics need at least 2 tokens");
  }
  return stats_from_rows({&activations}, StatsMode::PerSample);
}

LayerStats estimate_stats(std::span<const Tensor> calibration) {
  if (calibration.empty()) fail(ErrorKind::Stats, "calibration set is empty");
  std::vector<const Tensor*> blocks;
  std::size_t rows = 0;
  for (const Tensor& t : calibration) {
    blocks.push_back(&t);
    rows += t.rank() == 2 ? t.shape()[0] : 0;
  }
  if (rows < 2) fail(ErrorKind::Stats, "calibration statistics need at least 2 tokens");
  return stats_from_rows(blocks, StatsMode::Calibration);
}

DampingParams DampingParams::constant(Shape shape, double alpha, bool trainable) {
  return DampingParams{Tensor::full(std::move(shape), alpha, trainable)};
}

namespace {

// lambda [P] -> [P, 1] so it broadcasts over channels; [P, d] stays.
Tensor channel_broadcastable(const Tensor& lambda) {
  if (lambda.rank() == 1) return reshape(lambda, {lambda.shape()[0], 1});
  if (lambda.rank() == 2) return lambda;
  fail(ErrorKind::Dimension, "damping ratio must be [P] or [P, d], got " +
                                 shape_string(lambda.shape()));
}

// Splits r_prime [..., T, d] into (passthrough tokens or empty, perturbed tokens).
std::pair<std::optional<Tensor>, Tensor> split_tokens(const Tensor& r_prime, std::size_t perturbed) {
  if (r_prime.rank() < 2) {
    fail(ErrorKind::Dimension, "representation must be [..., T, d], got " +
                                   shape_string(r_prime.shape()));
  }
  const std::size_t tokens = r_prime.size(-2);
  if (perturbed > tokens) {
    fail(ErrorKind::Dimension, "damping ratio covers " + std::to_string(perturbed) +
                                   " tokens but the representation has " + std::to_string(tokens));
  }
  const std::size_t kept = tokens - perturbed;
  if (kept == 0) return {std::nullopt, r_prime};
  return {slice(r_prime, -2, 0, kept), slice(r_prime, -2, kept, perturbed)};
}

}  // namespace

Tensor apply_bottleneck(const Tensor& r_prime, const Tensor& lambda, const Tensor& noise) {
  const Tensor lam = channel_broadcastable(lambda);
  auto [kept, patches] = split_tokens(r_prime, lam.shape()[0]);
  if (noise.rank() < 2 || noise.size(-2) != patches.size(-2) || noise.size(-1) != patches.size(-1)) {
    fail(ErrorKind::Dimension, "noise " + shape_string(noise.shape()) +
                                   " does not match perturbed block " + shape_string(patches.shape()));
  }
  if (lam.shape()[1] != 1 && lam.shape()[1] != patches.size(-1)) {
    fail(ErrorKind::Dimension, "per-channel damping ratio has wrong width");
  }
  const Tensor damped = lam * patches + (-lam + 1.0) * noise;
  if (!kept) return damped;
  Shape kept_shape = damped.shape();
  kept_shape[kept_shape.size() - 2] = kept->size(-2);
  return concat({expand(*kept, kept_shape), damped}, -2);
}

Tensor kl_capacity(const Tensor& r_prime, const DampingParams& damping, const LayerStats& stats) {
  const auto sd = stats.stddev.data();
  for (double s : sd) {
    if (!(s >= kStdFloor)) fail(ErrorKind::Stats, "layer std below the configured floor");
  }
  auto [kept, patches] = split_tokens(r_prime, damping.perturbed_tokens());
  (void)kept;
  const Tensor& alpha = damping.alpha;
  const Tensor lam = channel_broadcastable(sigmoid(alpha));
  const Tensor keep = channel_broadcastable(sigmoid(-alpha));  // 1 - lambda without cancellation
  const Tensor neg_log_keep = channel_broadcastable(softplus(alpha));
  const Tensor standardized = (patches - stats.mean) / stats.stddev;
  // -log(1-lam) + ((1-lam)^2 + lam^2 c^2) / 2 - 1/2
  return neg_log_keep + scale(square(keep) + square(lam) * square(standardized), 0.5) + (-0.5);
}

const TraceEntry* ActivationTrace::find(std::size_t layer) const {
  for (const TraceEntry& entry : layers) {
    if (entry.layer == layer) return &entry;
  }
  return nullptr;
}

BottleneckHookSet::BottleneckHookSet(LayerRange range, const DampingParams& damping,
                                     const std::vector<LayerStats>& stats, std::size_t batch)
    : range_(range), damping_(&damping), stats_(&stats), batch_(batch) {
  if (stats.size() != range.count()) {
    fail(ErrorKind::Contract, "need one LayerStats per hooked layer");
  }
  lambda_ = damping.lambda();
}

BottleneckHookSet& BottleneckHookSet::fresh_noise(Rng& rng) {
  mode_ = NoiseMode::Fresh;
  rng_ = &rng;
  return *this;
}

BottleneckHookSet& BottleneckHookSet::frozen_noise(const std::vector<Tensor>& standard_normal) {
  if (standard_normal.size() != range_.count()) {
    fail(ErrorKind::Contract, "frozen noise needs one tensor per hooked layer");
  }
  mode_ = NoiseMode::Frozen;
  frozen_ = &standard_normal;
  return *this;
}

BottleneckHookSet& BottleneckHookSet::mean_noise() {
  mode_ = NoiseMode::Mean;
  return *this;
}

std::vector<Tensor> draw_standard_noise(Rng& rng, std::size_t layers, std::size_t batch,
                                        std::size_t tokens, std::size_t dim) {
  std::vector<Tensor> out;
  out.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> values(batch * tokens * dim);
    for (double& v : values) v = rng.normal();
    out.push_back(Tensor::from_data({batch, tokens, dim}, std::move(values)));
  }
  return out;
}

Tensor BottleneckHookSet::operator()(std::size_t layer, const Tensor& residual) {
  if (layer < range_.first || layer > range_.last) return residual;
  const std::size_t index = layer - range_.first;
  const LayerStats& stats = (*stats_)[index];
  const std::size_t tokens = damping_->perturbed_tokens();
  const std::size_t dim = residual.size(-1);
  Tensor noise;
  switch (mode_) {
    case NoiseMode::Fresh: {
      Tensor g = draw_standard_noise(*rng_, 1, batch_, tokens, dim).front();
      noise = g * stats.stddev + stats.mean;
      break;
    }
    case NoiseMode::Frozen:
      noise = (*frozen_)[index] * stats.stddev + stats.mean;
      break;
    case NoiseMode::Mean:
      noise = expand(stats.mean, {batch_, tokens, dim});
      break;
  }
  noise = noise.detach();
  Tensor z = apply_bottleneck(residual, lambda_, noise);
  trace_.layers.push_back(TraceEntry{layer, residual, z, noise, index});
  return z;
}

Tensor compression_term(const ActivationTrace& trace, const BottleneckSpec& spec,
                        LayerRange range, const DampingParams& damping,
                        const std::vector<LayerStats>& stats) {
  auto entry_for = [&](std::size_t layer) -> const TraceEntry& {
    const TraceEntry* entry = trace.find(layer);
    if (!entry) fail(ErrorKind::Contract, "trace is missing hooked layer " + std::to_string(layer));
    return *entry;
  };
  if (spec.mode != BottleneckMode::CoibaPerLayerBeta) {
    const TraceEntry& first = entry_for(range.first);
    return mean(kl_capacity(first.r_prime, damping, stats[first.stats_index]));
  }
  Tensor total;
  bool started = false;
  for (std::size_t layer = range.first; layer <= range.last; ++layer) {
    const TraceEntry& entry = entry_for(layer);
    const double beta_l = spec.layer_betas.at(layer - range.first);
    Tensor term = scale(mean(kl_capacity(entry.r_prime, damping, stats[entry.stats_index])), beta_l);
    total = started ? total + term : term;
    started = true;
  }
  return scale(total, 1.0 / static_cast<double>(range.count()));
}

}  // namespace coiba
