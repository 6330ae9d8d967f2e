#pragma once

// Noise injection, activation statistics and the per-element KL capacity of
// a damped Gaussian bottleneck.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coiba/rng.hpp"
#include "coiba/tensor.hpp"

namespace coiba {

inline constexpr double kStdFloor = 1e-5;

enum class BottleneckMode { Iba, IbaStar, Coiba, CoibaPerLayerBeta };
enum class StatsMode { PerSample, Calibration };
// How token scores are read out of the fitted damping ratio.
enum class Readout { CapacityMean, FirstLayerCapacity, Lambda };

std::string to_string(BottleneckMode mode);
std::string to_string(StatsMode mode);
std::string to_string(Readout readout);
BottleneckMode parse_bottleneck_mode(const std::string& text);
StatsMode parse_stats_mode(const std::string& text);
Readout parse_readout(const std::string& text);

struct BottleneckSpec {
  BottleneckMode mode = BottleneckMode::Coiba;
  // 1-based block indices; 0 means "derive" (first block, last block).
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  double beta = 1.0;
  std::vector<double> layer_betas;  // CoibaPerLayerBeta only
  std::vector<double> layer_weights;  // IbaStar only; empty = uniform
  std::size_t iterations = 10;
  double learning_rate = 1.0;
  std::size_t noise_batch = 10;
  std::uint64_t seed = 0;
  StatsMode stats_mode = StatsMode::PerSample;
  double init_alpha = 5.0;
  bool include_class_token = false;
  bool per_channel = false;
  Readout readout = Readout::FirstLayerCapacity;
};

struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t count() const { return last - first + 1; }
};

// Fills in derived layers (first = 1, last = depth). validate_spec checks
// every field and throws a config error listing all violations.
LayerRange resolve_layers(const BottleneckSpec& spec, std::size_t depth);
void validate_spec(const BottleneckSpec& spec, std::size_t depth);

struct LayerStats {
  Tensor mean;    // [d]
  Tensor stddev;  // [d], every entry >= kStdFloor
  StatsMode mode = StatsMode::PerSample;
};

// Per-channel population mean and std over the rows of `activations`
// ([tokens, d]), std floored at kStdFloor.
LayerStats estimate_stats(const Tensor& activations);
// Pools every row of every calibration activation.
LayerStats estimate_stats(std::span<const Tensor> calibration);

struct DampingParams {
  Tensor alpha;  // [P] per token, [P, d] per channel; P counts the class token when included

  static DampingParams constant(Shape shape, double alpha, bool trainable);
  Tensor lambda() const { return sigmoid(alpha); }
  std::size_t perturbed_tokens() const { return alpha.shape().at(0); }
};

// Z = lambda * R' + (1 - lambda) * noise on the trailing `P` tokens of
// r_prime ([..., T, d]); leading tokens (the class token) pass through.
// noise is [..., P, d]; batch dims broadcast.
Tensor apply_bottleneck(const Tensor& r_prime, const Tensor& lambda, const Tensor& noise);

// Per-element KL[N(lam r + (1-lam) mu, (1-lam)^2 sigma^2) || N(mu, sigma^2)]
// in nats over the perturbed tokens: [..., P, d].
Tensor kl_capacity(const Tensor& r_prime, const DampingParams& damping, const LayerStats& stats);

struct TraceEntry {
  std::size_t layer = 0;
  Tensor r_prime;
  Tensor z;
  Tensor noise;
  std::size_t stats_index = 0;
};

struct ActivationTrace {
  std::vector<TraceEntry> layers;
  const TraceEntry* find(std::size_t layer) const;
};

enum class NoiseMode { Fresh, Frozen, Mean };

// Hook state for one hooked forward pass. Its call operator matches
// vit's BlockHook and records an ActivationTrace as it goes.
class BottleneckHookSet {
 public:
  BottleneckHookSet(LayerRange range, const DampingParams& damping,
                    const std::vector<LayerStats>& stats, std::size_t batch);

  // Fresh standard-normal draws per hooked layer.
  BottleneckHookSet& fresh_noise(Rng& rng);
  // Standard-normal draws supplied per hooked layer ([batch, P, d] each).
  BottleneckHookSet& frozen_noise(const std::vector<Tensor>& standard_normal);
  // Noise fixed to the layer mean.
  BottleneckHookSet& mean_noise();

  Tensor operator()(std::size_t layer, const Tensor& residual);

  const ActivationTrace& trace() const { return trace_; }
  LayerRange range() const { return range_; }

 private:
  LayerRange range_;
  const DampingParams* damping_;
  const std::vector<LayerStats>* stats_;
  std::size_t batch_;
  NoiseMode mode_ = NoiseMode::Mean;
  Rng* rng_ = nullptr;
  const std::vector<Tensor>* frozen_ = nullptr;
  Tensor lambda_;
  ActivationTrace trace_;
};

// Standard-normal tensors [batch, P, d], one per hooked layer.
std::vector<Tensor> draw_standard_noise(Rng& rng, std::size_t layers, std::size_t batch,
                                        std::size_t tokens, std::size_t dim);

// Compression term: mean capacity at the first hooked layer (Coiba, Iba), or
// (1/L) sum_l beta_l mean capacity_l (CoibaPerLayerBeta). Not scaled by the
// single beta.
Tensor compression_term(const ActivationTrace& trace, const BottleneckSpec& spec,
                        LayerRange range, const DampingParams& damping,
                        const std::vector<LayerStats>& stats);

}  // namespace coiba
