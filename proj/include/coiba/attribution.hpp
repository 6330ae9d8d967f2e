#pragma once

// Fits the damping ratio of a bottleneck against the information bottleneck
// objective and reads attribution maps out of it.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "coiba/bottleneck.hpp"
#include "coiba/tensor.hpp"
#include "coiba/vit.hpp"

namespace coiba {

struct AttributionMap {
  std::vector<double> token_scores;  // [P], >= 0 (bits for capacity readouts)
  Tensor pixel_map;                  // [H, W]
  std::string method;
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  double loss_ce = 0.0;
  double loss_compression = 0.0;  // nats, unscaled by beta
  double runtime_ms = 0.0;
  std::vector<double> lambda;            // final damping ratio, averaged over channels
  std::vector<double> bottleneck_probs;  // class probabilities under the fitted bottleneck
  std::vector<double> layer_capacity;    // mean capacity per hooked layer, nats
};

// Capacity at the first hooked layer is at least the mean over the hooked
// layers. Expected to hold but not guaranteed; reported, never enforced.
bool upper_bound_holds(const AttributionMap& map);

enum class UpsampleMode { Bilinear, Nearest };

// sqrt(P) x sqrt(P) grid -> [H, W] (H = W = image_size). Bilinear samples at
// pixel centres with edge clamping.
Tensor upsample_scores(std::span<const double> token_scores, std::size_t image_size,
                       UpsampleMode mode = UpsampleMode::Bilinear);

// Calibration-mode statistics for the hooked layers, pooled over `images`.
std::vector<LayerStats> calibration_stats(const ModelCheckpoint& model, std::span<const Tensor> images,
                                          LayerRange range);

// Optional knobs that are not part of BottleneckSpec.
struct AttributionOptions {
  const std::vector<LayerStats>* calibration = nullptr;  // required for StatsMode::Calibration
  UpsampleMode upsample = UpsampleMode::Bilinear;
};

// Dispatches on spec.mode.
AttributionMap attribute(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                         const BottleneckSpec& spec, const AttributionOptions& options = {});

// Shared damping ratio over spec's [first, last] layers (Coiba or
// CoibaPerLayerBeta).
AttributionMap attribute_coiba(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                               const BottleneckSpec& spec, const AttributionOptions& options = {});

// Single-layer bottleneck at `layer` with trade-off `beta`; other fields of
// `base` (iterations, lr, seed, ...) are reused.
AttributionMap attribute_iba(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                             std::size_t layer, double beta, const BottleneckSpec& base,
                             const AttributionOptions& options = {});

// Weighted sum of per-layer single-layer maps over spec's layer range.
AttributionMap attribute_iba_star(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                  const BottleneckSpec& spec, const AttributionOptions& options = {});

struct ObjectiveValue {
  double cross_entropy = 0.0;
  double compression = 0.0;
  double total = 0.0;
  std::vector<double> probs;  // mean class probabilities over the evaluation noise
};

// The objective at a given damping ratio, on the seed-derived evaluation
// noise. Deterministic; no optimization.
ObjectiveValue evaluate_objective(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                  const BottleneckSpec& spec, const DampingParams& damping,
                                  const AttributionOptions& options = {});

// Gradient of the training-noise objective (first iteration's noise) with
// respect to alpha. Used for gradient checks.
struct ObjectiveGradient {
  double loss = 0.0;
  std::vector<double> grad;
};
ObjectiveGradient objective_gradient(const ModelCheckpoint& model, const Tensor& image, std::size_t target,
                                     const BottleneckSpec& spec, const std::vector<double>& alpha,
                                     const AttributionOptions& options = {});

// Runs f(i) for i in [0, n) on `jobs` worker threads. Exceptions from the
// lowest failing index are rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::size_t error_index = n;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

// One map per image with per-image seeds derive_seed(spec.seed, i); output is
// independent of `jobs`.
std::vector<AttributionMap> attribute_many(const ModelCheckpoint& model, std::span<const Tensor> images,
                                           std::span<const std::size_t> targets, const BottleneckSpec& spec,
                                           std::size_t jobs, const AttributionOptions& options = {});

// 16-bit PGM of the min-max normalized pixel map plus a JSON sidecar.
void save_attribution(const AttributionMap& map, const std::filesystem::path& pgm_path,
                      const std::filesystem::path& json_path);
std::string attribution_sidecar_json(const AttributionMap& map);
// Reads a sidecar back (pixel map rebuilt from token_scores).
AttributionMap load_attribution_sidecar(const std::filesystem::path& json_path, std::size_t image_size,
                                        UpsampleMode mode = UpsampleMode::Bilinear);

}  // namespace coiba
