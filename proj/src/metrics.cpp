#include "coiba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

struct ImageDims {
  std::size_t h = 0, w = 0, c = 0;
  std::size_t pixels() const { return h * w; }
};

ImageDims image_dims(const Tensor& image) {
  if (image.rank() != 3) fail(ErrorKind::Dimension, "expected an [H, W, C] image, got " + shape_string(image.shape()));
  return {image.size(0), image.size(1), image.size(2)};
}

void check_map(const Tensor& pixel_map, const ImageDims& dims) {
  if (pixel_map.rank() != 2 || pixel_map.size(0) != dims.h || pixel_map.size(1) != dims.w) {
    fail(ErrorKind::Dimension, "pixel map " + shape_string(pixel_map.shape()) + " does not match image " +
                                   std::to_string(dims.h) + "x" + std::to_string(dims.w));
  }
}

// Copies `source` pixels (all channels) into `target` for the given pixel indices.
void copy_pixels(std::vector<double>& target, std::span<const double> source, std::span<const std::size_t> pixels,
                 std::size_t channels) {
  for (std::size_t p : pixels) {
    for (std::size_t ch = 0; ch < channels; ++ch) target[p * channels + ch] = source[p * channels + ch];
  }
}

std::size_t count_at(double fraction, std::size_t total) {
  return std::min(total, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total))));
}

std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double half = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - half;
    k[i] = std::exp(-0.5 * (x / sigma) * (x / sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

std::vector<double> ranks_of(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

Scorer model_scorer(const ModelCheckpoint& model) {
  return [&model](const Tensor& image, std::size_t target) {
    if (target >= model.config().num_classes) fail(ErrorKind::Index, "target out of range");
    return predict_proba(model, image)[0][target];
  };
}

std::vector<std::size_t> rank_pixels(const Tensor& pixel_map) {
  const auto v = pixel_map.data();
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return order;
}

Tensor gaussian_blur(const Tensor& image, std::size_t kernel, double sigma) {
  const ImageDims d = image_dims(image);
  if (kernel == 0 || kernel % 2 == 0 || !(sigma > 0.0)) fail(ErrorKind::Config, "blur kernel must be odd and sigma > 0");
  const std::vector<double> k = gaussian_kernel(kernel, sigma);
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto src = image.data();
  const auto h = static_cast<std::ptrdiff_t>(d.h);
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < d.c; ++ch) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -half; t <= half; ++t) {
          acc += k[static_cast<std::size_t>(t + half)] * src[(y * w + reflect(x + t, w)) * d.c + ch];
        }
        tmp[(y * w + x) * d.c + ch] = acc;
      }
    }
  }
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < d.c; ++ch) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -half; t <= half; ++t) {
          acc += k[static_cast<std::size_t>(t + half)] * tmp[(reflect(y + t, h) * w + x) * d.c + ch];
        }
        out[(y * w + x) * d.c + ch] = acc;
      }
    }
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::Dimension, "trapezoid needs equal-length series");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2.0;
  return area;
}

std::vector<double> fraction_grid(double step) {
  if (!(step > 0.0) || step > 1.0) fail(ErrorKind::Config, "step_fraction must be in (0, 1]");
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    const double f = static_cast<double>(i) * step;
    if (f >= 1.0 - 1e-12) break;
    out.push_back(f);
  }
  out.push_back(1.0);
  return out;
}

InsDelResult insertion_deletion(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map,
                                std::size_t target, const InsDelOptions& options) {
  const ImageDims d = image_dims(image);
  check_map(pixel_map, d);
  const std::vector<double> fractions = fraction_grid(options.step_fraction);
  const std::vector<std::size_t> order = rank_pixels(pixel_map);
  const Tensor blurred = gaussian_blur(image, options.blur_kernel, options.blur_sigma);
  const auto original = image.data();
  const std::vector<double> zeros(original.size(), 0.0);

  InsDelResult r;
  r.insertion.fractions = fractions;
  r.deletion.fractions = fractions;
  std::vector<double> inserted(blurred.data().begin(), blurred.data().end());
  std::vector<double> deleted(original.begin(), original.end());
  std::size_t done = 0;
  for (double f : fractions) {
    const std::size_t k = count_at(f, d.pixels());
    const std::span<const std::size_t> fresh(order.data() + done, k - done);
    copy_pixels(inserted, original, fresh, d.c);
    copy_pixels(deleted, zeros, fresh, d.c);
    done = k;
    r.insertion.scores.push_back(scorer(Tensor::from_data(image.shape(), inserted), target));
    r.deletion.scores.push_back(scorer(Tensor::from_data(image.shape(), deleted), target));
  }
  r.insertion.auc = trapezoid(fractions, r.insertion.scores);
  r.deletion.auc = trapezoid(fractions, r.deletion.scores);
  return r;
}

Tensor road_impute(const Tensor& image, std::span<const std::uint8_t> mask, double sigma, std::uint64_t seed) {
  const ImageDims d = image_dims(image);
  if (mask.size() != d.pixels()) fail(ErrorKind::Dimension, "mask size does not match image");
  if (sigma < 0.0) fail(ErrorKind::Config, "road sigma must be >= 0");

  std::vector<std::ptrdiff_t> unknown_index(d.pixels(), -1);
  std::vector<std::size_t> unknown;
  for (std::size_t p = 0; p < d.pixels(); ++p) {
    if (mask[p]) {
      unknown_index[p] = static_cast<std::ptrdiff_t>(unknown.size());
      unknown.push_back(p);
    }
  }
  std::vector<double> out(image.data().begin(), image.data().end());
  if (unknown.empty()) return Tensor::from_data(image.shape(), std::move(out));
  if (unknown.size() == d.pixels()) fail(ErrorKind::Imputation, "every pixel is masked; nothing to impute from");

  auto neighbours = [&](std::size_t p, auto&& visit) {
    const auto y = static_cast<std::ptrdiff_t>(p / d.w);
    const auto x = static_cast<std::ptrdiff_t>(p % d.w);
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        const std::ptrdiff_t ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(d.h) || nx >= static_cast<std::ptrdiff_t>(d.w)) continue;
        visit(static_cast<std::size_t>(ny) * d.w + static_cast<std::size_t>(nx));
      }
    }
  };

  const auto n = static_cast<Eigen::Index>(unknown.size());
  std::vector<Eigen::Triplet<double>> triplets;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(d.c));
  const auto src = image.data();
  for (std::size_t i = 0; i < unknown.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    double degree = 0.0;
    neighbours(unknown[i], [&](std::size_t q) {
      degree += 1.0;
      if (unknown_index[q] >= 0) {
        triplets.emplace_back(row, static_cast<Eigen::Index>(unknown_index[q]), -1.0);
      } else {
        for (std::size_t ch = 0; ch < d.c; ++ch) rhs(row, static_cast<Eigen::Index>(ch)) += src[q * d.c + ch];
      }
    });
    triplets.emplace_back(row, row, degree);
  }
  Eigen::SparseMatrix<double> a(n, n);
  a.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
  if (solver.info() != Eigen::Success || (solver.vectorD().array() <= 1e-12).any()) {
    fail(ErrorKind::Imputation, "imputation system is singular");
  }
  const Eigen::MatrixXd solution = solver.solve(rhs);
  if (solver.info() != Eigen::Success) fail(ErrorKind::Imputation, "imputation solve failed");

  Rng rng(seed);
  for (std::size_t i = 0; i < unknown.size(); ++i) {
    for (std::size_t ch = 0; ch < d.c; ++ch) {
      const double noise = sigma > 0.0 ? sigma * rng.normal() : 0.0;
      out[unknown[i] * d.c + ch] = solution(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) + noise;
    }
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

double road(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map, std::size_t target,
            RoadOrder order, const RoadOptions& options) {
  const ImageDims d = image_dims(image);
  check_map(pixel_map, d);
  if (options.fractions.empty()) fail(ErrorKind::Config, "road needs at least one fraction");
  std::vector<std::size_t> ranking = rank_pixels(pixel_map);
  if (order == RoadOrder::LeRF) std::reverse(ranking.begin(), ranking.end());
  double total = 0.0;
  for (std::size_t i = 0; i < options.fractions.size(); ++i) {
    const double f = options.fractions[i];
    if (f < 0.0 || f > 1.0) fail(ErrorKind::Config, "road fractions must be in [0, 1]");
    std::vector<std::uint8_t> mask(d.pixels(), 0);
    const std::size_t k = count_at(f, d.pixels());
    for (std::size_t j = 0; j < k; ++j) mask[ranking[j]] = 1;
    const Tensor imputed = road_impute(image, mask, options.sigma, derive_seed(options.seed, i));
    total += scorer(imputed, target);
  }
  return total / static_cast<double>(options.fractions.size());
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::Dimension, "pearson needs equal-length series");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<SensitivityPoint> sensitivity_n(const Scorer& scorer, const Tensor& image, const Tensor& pixel_map,
                                            std::size_t target, std::span<const std::size_t> n_values,
                                            std::size_t trials, std::uint64_t seed) {
  const ImageDims d = image_dims(image);
  check_map(pixel_map, d);
  if (trials < 2) fail(ErrorKind::Config, "sensitivity-n needs at least 2 trials");
  const double base = scorer(image, target);
  const auto attribution = pixel_map.data();
  const auto original = image.data();
  std::vector<SensitivityPoint> out;
  for (std::size_t vi = 0; vi < n_values.size(); ++vi) {
    const std::size_t n = n_values[vi];
    if (n == 0 || n > d.pixels()) fail(ErrorKind::Config, "sensitivity n out of range");
    Rng rng(derive_seed(seed, vi));
    std::vector<std::size_t> pool(d.pixels());
    std::vector<double> sums, drops;
    for (std::size_t t = 0; t < trials; ++t) {
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      std::vector<double> masked(original.begin(), original.end());
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sum += attribution[pool[i]];
        for (std::size_t ch = 0; ch < d.c; ++ch) masked[pool[i] * d.c + ch] = 0.0;
      }
      sums.push_back(sum);
      drops.push_back(base - scorer(Tensor::from_data(image.shape(), std::move(masked)), target));
    }
    out.push_back({n, pearson(sums, drops)});
  }
  return out;
}

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    fail(ErrorKind::Dimension, "ssim needs two equal [H, W] maps, got " + shape_string(a.shape()) + " and " +
                                   shape_string(b.shape()));
  }
  constexpr std::size_t kWindow = 11;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  const std::size_t h = a.size(0), w = a.size(1);
  if (h < kWindow || w < kWindow) fail(ErrorKind::Dimension, "ssim needs maps of at least 11x11");
  const std::vector<double> k1 = gaussian_kernel(kWindow, 1.5);
  const auto x = a.data();
  const auto y = b.data();
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t oy = 0; oy + kWindow <= h; ++oy) {
    for (std::size_t ox = 0; ox + kWindow <= w; ++ox) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < kWindow; ++i) {
        for (std::size_t j = 0; j < kWindow; ++j) {
          const double g = k1[i] * k1[j];
          const double xv = x[(oy + i) * w + ox + j];
          const double yv = y[(oy + i) * w + ox + j];
          mx += g * xv;
          my += g * yv;
          sxx += g * xv * xv;
          syy += g * yv * yv;
          sxy += g * xv * yv;
        }
      }
      const double vx = sxx - mx * mx;
      const double vy = syy - my * my;
      const double cov = sxy - mx * my;
      total += ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

double map_ssim(const Tensor& a, const Tensor& b) {
  auto normalize = [](const Tensor& t) {
    const auto v = t.data();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.0);
    if (*hi > *lo) {
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
    }
    return Tensor::from_data(t.shape(), std::move(out));
  };
  return ssim(normalize(a), normalize(b));
}

std::optional<double> cka_linear(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.size(0) != y.size(0)) {
    fail(ErrorKind::Dimension, "cka needs [n, p] and [n, q] with matching n");
  }
  if (x.size(0) < 2) fail(ErrorKind::Dimension, "cka needs n >= 2");
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto n = static_cast<Eigen::Index>(x.size(0));
  RowMatrix a = Eigen::Map<const RowMatrix>(x.data().data(), n, static_cast<Eigen::Index>(x.size(1)));
  RowMatrix b = Eigen::Map<const RowMatrix>(y.data().data(), n, static_cast<Eigen::Index>(y.size(1)));
  a.rowwise() -= a.colwise().mean();
  b.rowwise() -= b.colwise().mean();
  const double xx = (a.transpose() * a).norm();
  const double yy = (b.transpose() * b).norm();
  if (xx <= 0.0 || yy <= 0.0) return std::nullopt;
  const double cross = (b.transpose() * a).squaredNorm();
  return std::clamp(cross / (xx * yy), 0.0, 1.0);
}

double ehr(const Tensor& pixel_map, const Tensor& mask) {
  if (pixel_map.shape() != mask.shape()) fail(ErrorKind::Dimension, "ehr map and mask shapes differ");
  const auto m = mask.data();
  if (std::none_of(m.begin(), m.end(), [](double v) { return v > 0.5; })) {
    fail(ErrorKind::Contract, "ehr needs a nonempty mask");
  }
  const std::vector<std::size_t> order = rank_pixels(pixel_map);
  std::vector<std::size_t> inside_prefix(order.size() + 1, 0);
  for (std::size_t i = 0; i < order.size(); ++i) inside_prefix[i + 1] = inside_prefix[i] + (m[order[i]] > 0.5 ? 1 : 0);
  std::vector<double> q, frac;
  for (int pct = 1; pct <= 100; ++pct) {
    const double quantile = pct / 100.0;
    const std::size_t k = std::max<std::size_t>(1, count_at(quantile, order.size()));
    q.push_back(quantile);
    frac.push_back(static_cast<double>(inside_prefix[k]) / static_cast<double>(k));
  }
  return trapezoid(q, frac) / (q.back() - q.front());
}

ConfidenceBinReport confidence_binned_report(std::span<const double> confidence,
                                             std::span<const double> delta_insdel,
                                             std::span<const double> delta_road, double bin_width) {
  if (confidence.size() != delta_insdel.size() || confidence.size() != delta_road.size()) {
    fail(ErrorKind::Dimension, "one confidence and one metric pair per sample required");
  }
  if (!(bin_width > 0.0) || bin_width > 1.0) fail(ErrorKind::Config, "bin width must be in (0, 1]");
  const auto bins = static_cast<std::size_t>(std::ceil(1.0 / bin_width - 1e-9));
  ConfidenceBinReport report;
  report.total = confidence.size();
  std::vector<double> sum_insdel(bins, 0.0), sum_road(bins, 0.0);
  std::vector<std::size_t> counts(bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) fail(ErrorKind::Contract, "confidence outside [0, 1] at sample " + std::to_string(i));
    const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(c / bin_width));
    ++counts[b];
    sum_insdel[b] += delta_insdel[i];
    sum_road[b] += delta_road[i];
    report.mean_delta_insdel += delta_insdel[i];
    report.mean_delta_road += delta_road[i];
  }
  if (report.total > 0) {
    report.mean_delta_insdel /= static_cast<double>(report.total);
    report.mean_delta_road /= static_cast<double>(report.total);
  }
  for (std::size_t b = 0; b < bins; ++b) {
    ConfidenceBin bin;
    bin.lo = static_cast<double>(b) * bin_width;
    bin.hi = std::min(1.0, static_cast<double>(b + 1) * bin_width);
    bin.count = counts[b];
    if (counts[b] > 0) {
      bin.mean_delta_insdel = sum_insdel[b] / static_cast<double>(counts[b]);
      bin.mean_delta_road = sum_road[b] / static_cast<double>(counts[b]);
    }
    report.bins.push_back(bin);
  }
  return report;
}

double sign_test_p(std::span<const double> differences) {
  std::size_t positive = 0, n = 0;
  for (double d : differences) {
    if (d == 0.0) continue;
    ++n;
    if (d > 0.0) ++positive;
  }
  if (n == 0) return 1.0;
  const std::size_t k = std::min(positive, n - positive);
  // Two-sided: 2 * P(X <= k) for X ~ Binomial(n, 1/2), in log space.
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double log_term = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(i) + 1.0) -
                            std::lgamma(static_cast<double>(n - i) + 1.0) - static_cast<double>(n) * std::log(2.0);
    tail += std::exp(log_term);
  }
  return std::min(1.0, 2.0 * tail);
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::Dimension, "spearman needs equal-length series");
  const std::vector<double> rx = ranks_of(x);
  const std::vector<double> ry = ranks_of(y);
  return pearson(rx, ry);
}

}  // namespace coiba
