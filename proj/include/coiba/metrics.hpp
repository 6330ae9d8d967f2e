#pragma once

// Faithfulness and similarity metrics for attribution maps. Everything that
// ranks pixels breaks ties by row-major order, so metrics depend only on the
// ordering of the map.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coiba/tensor.hpp"
#include "coiba/vit.hpp"

namespace coiba {

// Target-class probability for one image [H, W, C].
using Scorer = std::function<double(const Tensor& image, std::size_t target)>;

// Softmax probability from the model.
Scorer model_scorer(const ModelCheckpoint& model);

// Pixel indices (row-major) sorted by descending map value.
std::vector<std::size_t> rank_pixels(const Tensor& pixel_map);

// Separable Gaussian blur with reflect padding; image [H, W, C].
Tensor gaussian_blur(const Tensor& image, std::size_t kernel, double sigma);

struct EvalCurve {
  std::vector<double> fractions;
  std::vector<double> scores;
  double auc = 0.0;
};

double trapezoid(std::span<const double> x, std::span<const double> y);

// 0, step, 2 step, ..., then 1.
std::vector<double> fraction_grid(double step);

struct InsDelOptions {
  double step_fraction = 0.035;
  std::size_t blur_kernel = 11;
  double blur_sigma = 10.0;
};

struct InsDelResult {
  EvalCurve insertion;
  EvalCurve deletion;
};

InsDelResult insertion_deletion(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map,
                                std::size_t target, const InsDelOptions& options = {});

enum class RoadOrder { MoRF, LeRF };

// Replaces pixels with mask != 0 by the solution of the 8-neighbour averaging
// system (one sparse solve per channel), then adds N(0, sigma) to them.
Tensor road_impute(const Tensor& image, std::span<const std::uint8_t> mask, double sigma, std::uint64_t seed);

struct RoadOptions {
  std::vector<double> fractions{0.2, 0.4, 0.6, 0.8};
  double sigma = 0.01;
  std::uint64_t seed = 0;
};

// Mean target score over the removal fractions.
double road(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map, std::size_t target,
            RoadOrder order, const RoadOptions& options = {});

// Sample Pearson correlation; nullopt when either series has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct SensitivityPoint {
  std::size_t n = 0;
  std::optional<double> pcc;
};

std::vector<SensitivityPoint> sensitivity_n(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map,
                                            std::size_t target, std::span<const std::size_t> n_values,
                                            std::size_t trials, std::uint64_t seed);

// Gaussian-window SSIM (11x11, sigma 1.5), mean over valid windows. Inputs
// are [H, W] in [0, 1].
double ssim(const Tensor& a, const Tensor& b);

// SSIM after min-max normalizing each map (a constant map becomes zeros).
double map_ssim(const Tensor& a, const Tensor& b);

// Linear CKA between [n, p] and [n, q]; nullopt for a zero-norm input.
std::optional<double> cka_linear(const Tensor& x, const Tensor& y);

// Trapezoid area of the in-mask fraction of the top-q pixels for
// q = 1%, ..., 100%, divided by the q range so the result is in [0, 1].
double ehr(const Tensor& pixel_map, const Tensor& mask);

struct ConfidenceBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_delta_insdel;
  std::optional<double> mean_delta_road;
};

struct ConfidenceBinReport {
  std::vector<ConfidenceBin> bins;
  std::size_t total = 0;
  double mean_delta_insdel = 0.0;
  double mean_delta_road = 0.0;
};

// Bins [0, w), [w, 2w), ..., with the last bin closed at 1.
ConfidenceBinReport confidence_binned_report(std::span<const double> confidence,
                                             std::span<const double> delta_insdel,
                                             std::span<const double> delta_road, double bin_width = 0.2);

// Two-sided exact sign test on paired differences (zeros dropped).
double sign_test_p(std::span<const double> differences);

// Spearman rank correlation (average ranks for ties).
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

}  // namespace coiba
