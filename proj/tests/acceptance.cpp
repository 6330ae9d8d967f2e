// Acceptance run on the trained toy model. Prints one PASS/FAIL line per
// criterion and exits non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coiba/coiba.h"
#include "coiba/config.hpp"
#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/metrics.hpp"
#include "coiba/studies.hpp"
#include "oracles.hpp"

using namespace coiba;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kHeldoutSamples = 200;
constexpr std::size_t kLayerSamples = 30;
constexpr std::size_t kBetaSamples = 30;
constexpr std::size_t kSanitySamples = 20;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out.precision(precision);
  out << v;
  return out.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Accuracy with every ground-truth mask pixel set to zero.
double masked_accuracy(const ModelCheckpoint& model, const std::vector<SyntheticSample>& samples) {
  std::vector<SyntheticSample> masked;
  for (const SyntheticSample& s : samples) {
    std::vector<double> pixels(s.image.data().begin(), s.image.data().end());
    const std::size_t channels = s.image.size(-1);
    for (std::size_t i = 0; i < s.mask.numel(); ++i) {
      if (s.mask.data()[i] > 0.5) std::fill_n(pixels.begin() + i * channels, channels, 0.0);
    }
    SyntheticSample copy = s;
    copy.image = Tensor::from_data(s.image.shape(), std::move(pixels));
    masked.push_back(std::move(copy));
  }
  return accuracy(model, masked);
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

class Suite {
 public:
  Suite(RunConfig config, ModelCheckpoint model, SplitDataset data, fs::path work)
      : config_(std::move(config)), model_(std::move(model)), data_(std::move(data)), work_(std::move(work)) {}

  Outcome gradient_oracle() {
    const auto start = Clock::now();
    BottleneckSpec spec = attribution_spec(config_);
    Rng rng(stage_seed(config_, SeedStream::Evaluation) + 1);
    double worst = 0.0;
    for (std::size_t pair = 0; pair < 20; ++pair) {
      const SyntheticSample& s = data_.heldout[pair];
      std::vector<double> alpha(model_.config().num_patches());
      for (double& a : alpha) a = rng.uniform(-3.0, 3.0);
      spec.seed = stage_seed(config_, SeedStream::Attribution) + pair;
      const ObjectiveGradient g = objective_gradient(model_, s.image, s.label, spec, alpha);
      const double h = 1e-5;
      for (std::size_t i = 0; i < alpha.size(); ++i) {
        std::vector<double> up = alpha, down = alpha;
        up[i] += h;
        down[i] -= h;
        const double numeric = (objective_gradient(model_, s.image, s.label, spec, up).loss -
                                objective_gradient(model_, s.image, s.label, spec, down).loss) / (2.0 * h);
        worst = std::max(worst, oracle::rel_error(g.grad[i], numeric, 1e-6));
      }
    }
    const double runtime = seconds_since(start);
    return {worst < 1e-4 && runtime < 120.0,
            "pairs=20 max_rel_error=" + fmt(worst, 3) + " runtime_s=" + fmt(runtime, 3)};
  }

  Outcome kl_oracle() {
    Rng params(stage_seed(config_, SeedStream::Evaluation) + 2);
    Rng sampler(stage_seed(config_, SeedStream::Evaluation) + 3);
    auto capacity = [](double r, double alpha, const LayerStats& stats) {
      const Tensor tokens = Tensor::from_data({1, 2, 1}, {0.0, r});
      return kl_capacity(tokens, DampingParams::constant({1}, alpha, false), stats).item();
    };
    double worst_mc = 0.0;
    double worst_zero = 0.0;
    bool monotone = true;
    for (std::size_t t = 0; t < 50; ++t) {
      const double lam = params.uniform(0.02, 0.98);
      const double r = params.uniform(-3.0, 3.0);
      const double mu = params.uniform(-1.0, 1.0);
      const double sigma = params.uniform(0.2, 2.5);
      const LayerStats stats{Tensor::full({1}, mu), Tensor::full({1}, sigma), StatsMode::PerSample};
      const double closed = capacity(r, std::log(lam / (1.0 - lam)), stats);
      const double mc = oracle::monte_carlo_kl(lam, r, mu, sigma, 1'000'000, sampler);
      worst_mc = std::max(worst_mc, std::abs(closed - mc));
      worst_zero = std::max(worst_zero, std::abs(capacity(r, -800.0, stats)));
      double previous = -1.0;
      for (int k = 1; k <= 19; ++k) {
        const double l = 0.05 * k;
        const double v = capacity(r, std::log(l / (1.0 - l)), stats);
        if (!(v >= previous)) monotone = false;
        previous = v;
      }
    }
    return {worst_mc < 1e-2 && worst_zero < 1e-9 && monotone,
            "tuples=50 max_abs_error_nats=" + fmt(worst_mc, 3) + " lambda0_max=" + fmt(worst_zero, 3) +
                " monotone=" + (monotone ? "yes" : "no")};
  }

  Outcome transparency() {
    const std::size_t depth = model_.config().depth;
    const std::size_t tokens = model_.config().num_tokens();
    const LayerRange range{1, depth};
    std::size_t clean_matches = 0;
    const std::size_t clean_images = 10;
    for (std::size_t i = 0; i < clean_images; ++i) {
      const Tensor& image = data_.heldout[i].image;
      std::vector<LayerStats> stats;
      const std::vector<Tensor> inputs = block_inputs(model_, image);
      for (std::size_t l = 1; l <= depth; ++l) {
        const Tensor& r = inputs[l - 1];
        stats.push_back(estimate_stats(reshape(slice(r, 1, 1, tokens - 1), {tokens - 1, r.size(-1)})));
      }
      const DampingParams open = DampingParams::constant({model_.config().num_patches()}, 40.0, false);
      Rng rng(100 + i);
      BottleneckHookSet hooks(range, open, stats, 1);
      hooks.fresh_noise(rng);
      const Tensor hooked = forward(model_, image, [&](std::size_t l, const Tensor& r) { return hooks(l, r); });
      if (same_bits(hooked, forward(model_, image))) ++clean_matches;
    }
    std::size_t collapse_matches = 0;
    std::size_t collapse_total = 0;
    const BottleneckSpec base = attribution_spec(config_);
    for (std::size_t layer = 1; layer <= depth; ++layer) {
      for (std::size_t i = 0; i < 2; ++i) {
        const SyntheticSample& s = data_.heldout[20 + 2 * layer + i];
        BottleneckSpec spec = base;
        spec.first_layer = layer;
        spec.last_layer = layer;
        const AttributionMap c = attribute_coiba(model_, s.image, s.label, spec);
        const AttributionMap b = attribute_iba(model_, s.image, s.label, layer, base.beta, base);
        const bool same = c.token_scores == b.token_scores && c.lambda == b.lambda &&
                          c.bottleneck_probs == b.bottleneck_probs && same_bits(c.pixel_map, b.pixel_map);
        collapse_matches += same ? 1 : 0;
        ++collapse_total;
      }
    }
    return {clean_matches == clean_images && collapse_matches == collapse_total,
            "lambda1_bitwise=" + std::to_string(clean_matches) + "/" + std::to_string(clean_images) +
                " coiba_s_eq_e_vs_iba_bitwise=" + std::to_string(collapse_matches) + "/" +
                std::to_string(collapse_total)};
  }

  Outcome localization() {
    const auto start = Clock::now();
    const auto& maps = fitted_maps();
    const double attribution_s = attribution_seconds_;
    std::size_t hits = 0;
    std::size_t ehr_wins = 0;
    std::size_t bound_holds = 0;
    const std::size_t size = model_.config().image_size;
    const Tensor uniform = Tensor::full({size, size}, 1.0);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto& scores = maps[i].token_scores;
      const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
      if (best == data_.heldout[i].cell) ++hits;
      if (upper_bound_holds(maps[i])) ++bound_holds;
      if (ehr(maps[i].pixel_map, data_.heldout[i].mask) > ehr(uniform, data_.heldout[i].mask)) ++ehr_wins;
    }
    const double runtime = attribution_s + seconds_since(start);
    const double n = static_cast<double>(maps.size());
    return {hits >= 0.9 * n && ehr_wins >= 0.9 * n && runtime < 600.0,
            "samples=" + std::to_string(maps.size()) + " argmax_hit=" + fmt(hits / n) + " ehr_beats_uniform=" +
                fmt(ehr_wins / n) + " runtime_s=" + fmt(runtime, 4) + " (report: upper_bound_holds=" +
                std::to_string(bound_holds) + "/" + std::to_string(maps.size()) + ")"};
  }

  Outcome faithfulness() {
    const auto& maps = fitted_maps();
    std::span<const SyntheticSample> samples(data_.heldout.data(), maps.size());
    const EvaluationReport coiba = evaluate_maps(model_, samples, maps, config_, 1);
    std::vector<AttributionMap> random;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      random.push_back(random_map(model_.config().image_size, stage_seed(config_, SeedStream::Evaluation) + 1000 + i));
    }
    const EvaluationReport baseline = evaluate_maps(model_, samples, random, config_, 1);
    std::vector<double> d_insdel, d_road;
    double mean_insdel_c = 0.0, mean_road_c = 0.0, mean_insdel_r = 0.0, mean_road_r = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      d_insdel.push_back(coiba.samples[i].delta_insdel() - baseline.samples[i].delta_insdel());
      d_road.push_back(coiba.samples[i].delta_road() - baseline.samples[i].delta_road());
      mean_insdel_c += coiba.samples[i].delta_insdel() / maps.size();
      mean_road_c += coiba.samples[i].delta_road() / maps.size();
      mean_insdel_r += baseline.samples[i].delta_insdel() / maps.size();
      mean_road_r += baseline.samples[i].delta_road() / maps.size();
    }
    const double p_insdel = sign_test_p(d_insdel);
    const double p_road = sign_test_p(d_road);

    // Trend only: CoIBA against each single-layer IBA on the layer-study samples.
    const LayerComparison& layers = layer_comparison();
    const std::size_t k = layers.delta_insdel.size();
    double coiba_subset = 0.0;
    for (std::size_t i = 0; i < k; ++i) coiba_subset += coiba.samples[i].delta_insdel() / k;
    std::size_t beaten = 0;
    double best_iba = -1e9;
    for (std::size_t l = 0; l < layers.layers.size(); ++l) {
      double mean = 0.0;
      for (std::size_t i = 0; i < k; ++i) mean += layers.delta_insdel[i][l] / k;
      best_iba = std::max(best_iba, mean);
      if (coiba_subset >= mean) ++beaten;
    }
    const bool pass = mean_insdel_c > mean_insdel_r && mean_road_c > mean_road_r && p_insdel < 0.01 && p_road < 0.01;
    return {pass, "samples=" + std::to_string(maps.size()) + " dInsDel coiba=" + fmt(mean_insdel_c) + " random=" +
                      fmt(mean_insdel_r) + " p=" + fmt(p_insdel, 3) + " dROAD coiba=" + fmt(mean_road_c) +
                      " random=" + fmt(mean_road_r) + " p=" + fmt(p_road, 3) + " (report: coiba dInsDel " +
                      fmt(coiba_subset) + " >= iba in " + std::to_string(beaten) + "/" +
                      std::to_string(layers.layers.size()) + " layers, best iba " + fmt(best_iba) + ", n=" +
                      std::to_string(k) + ")"};
  }

  Outcome layer_discrepancy() {
    const LayerComparison& c = layer_comparison();
    double off_max = 0.0;
    double off_mean = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < c.layers.size(); ++a) {
      for (std::size_t b = a + 1; b < c.layers.size(); ++b) {
        off_max = std::max(off_max, c.ssim[a][b]);
        off_mean += c.ssim[a][b];
        ++pairs;
      }
    }
    off_mean /= static_cast<double>(pairs);
    const std::size_t total = c.best_layer.size();
    const std::size_t top = *std::max_element(c.best_counts.begin(), c.best_counts.end());
    std::string counts;
    for (std::size_t v : c.best_counts) counts += (counts.empty() ? "" : ",") + std::to_string(v);
    const bool pass = off_max < 1.0 && c.distance_spearman && *c.distance_spearman < 0.0 &&
                      static_cast<double>(top) <= 0.6 * static_cast<double>(total);
    return {pass, "samples=" + std::to_string(total) + " mean_offdiag_ssim=" + fmt(off_mean) + " max_offdiag_ssim=" +
                      fmt(off_max) + " spearman=" + (c.distance_spearman ? fmt(*c.distance_spearman) : "undefined") +
                      " best_counts=[" + counts + "]"};
  }

  Outcome beta_ablation() {
    RunConfig c = config_;
    c.studies.beta_values = {0.01, 0.1, 1.0, 10.0, 100.0};
    std::span<const SyntheticSample> samples(data_.heldout.data(), kBetaSamples);
    const auto rows = ablate(model_, samples, c, AblationAxis::Beta, data_.train, 1);
    bool non_increasing = true;
    std::string acc;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      acc += (acc.empty() ? "" : ",") + fmt(rows[i].accuracy, 3);
      if (i > 0 && rows[i].accuracy > rows[i - 1].accuracy) non_increasing = false;
    }
    const bool collapse = rows.back().accuracy <= 0.2 * rows.front().accuracy;
    return {non_increasing && collapse,
            "samples=" + std::to_string(kBetaSamples) + " beta=0.01,0.1,1,10,100 accuracy=[" + acc + "]"};
  }

  Outcome sanity() {
    RunConfig c = config_;
    c.studies.sanity_mode = RandomizeMode::Cumulative;
    c.studies.sanity_layers = {0};
    std::span<const SyntheticSample> samples(data_.heldout.data(), kSanitySamples);
    const auto rows = sanity_check(model_, samples, c, data_.train, 1);
    std::optional<double> none, from_zero;
    for (const SanityRow& r : rows) {
      if (!r.layer_index) none = r.mean_ssim;
      else if (*r.layer_index == 0) from_zero = r.mean_ssim;
    }
    const bool pass = none && from_zero && *none == 1.0 && *from_zero < 0.75;
    return {pass, "samples=" + std::to_string(kSanitySamples) + " ssim_none=" + (none ? fmt(*none, 17) : "missing") +
                      " ssim_cumulative_from_0=" + (from_zero ? fmt(*from_zero) : "missing")};
  }

  Outcome metric_contracts() {
    const Scorer scorer = model_scorer(model_);
    const auto& maps = fitted_maps();
    const InsDelOptions insdel{config_.evaluation.step_fraction, config_.evaluation.blur_kernel,
                               config_.evaluation.blur_sigma};
    const RoadOptions road_options{config_.evaluation.road_fractions, config_.evaluation.road_sigma, 7};
    bool endpoints = true;
    bool invariant = true;
    const std::size_t checks = 5;
    for (std::size_t i = 0; i < checks; ++i) {
      const SyntheticSample& s = data_.heldout[i];
      const Tensor& map = maps[i].pixel_map;
      const Tensor moved = add_scalar(scale(map, 2.0), 3.0);
      const InsDelResult a = insertion_deletion(scorer, s.image, map, s.label, insdel);
      const InsDelResult b = insertion_deletion(scorer, s.image, moved, s.label, insdel);
      const double original = scorer(s.image, s.label);
      endpoints = endpoints && a.deletion.scores.front() == original && a.insertion.scores.back() == original &&
                  a.deletion.scores.back() == scorer(Tensor::zeros(s.image.shape()), s.label) &&
                  a.insertion.scores.front() ==
                      scorer(gaussian_blur(s.image, insdel.blur_kernel, insdel.blur_sigma), s.label);
      invariant = invariant && a.insertion.scores == b.insertion.scores && a.deletion.scores == b.deletion.scores;
      for (auto order : {RoadOrder::MoRF, RoadOrder::LeRF}) {
        invariant = invariant && road(scorer, s.image, map, s.label, order, road_options) ==
                                     road(scorer, s.image, moved, s.label, order, road_options);
      }
      invariant = invariant && ehr(map, s.mask) == ehr(moved, s.mask);
      const std::vector<std::size_t> ns{1, 10, 100};
      const auto sa = sensitivity_n(scorer, s.image, map, s.label, ns, 20, 11);
      const auto sb = sensitivity_n(scorer, s.image, moved, s.label, ns, 20, 11);
      for (std::size_t j = 0; j < ns.size(); ++j) {
        if (sa[j].pcc.has_value() != sb[j].pcc.has_value()) invariant = false;
        else if (sa[j].pcc && std::abs(*sa[j].pcc - *sb[j].pcc) > 1e-9) invariant = false;
      }
    }
    const double constant = 0.4375;
    const Scorer flat = [constant](const Tensor&, std::size_t) { return constant; };
    double worst = 0.0;
    for (std::size_t i = 0; i < checks; ++i) {
      const InsDelResult r = insertion_deletion(flat, data_.heldout[i].image, maps[i].pixel_map, 0, insdel);
      worst = std::max({worst, std::abs(r.insertion.auc - constant), std::abs(r.deletion.auc - constant)});
    }
    return {endpoints && invariant && worst < 1e-9,
            std::string("endpoints_exact=") + (endpoints ? "yes" : "no") + " affine_invariant=" +
                (invariant ? "yes" : "no") + " constant_model_auc_error=" + fmt(worst, 3)};
  }

  Outcome determinism() {
    const char* patch = R"({
      "seed": 11,
      "model": {"depth": 3, "embed_dim": 32, "heads": 2, "mlp_ratio": 2, "num_classes": 4},
      "bottleneck": {"iterations": 5, "noise_batch": 4},
      "training": {"samples": 200, "epochs": 2},
      "evaluation": {"samples": 8, "sensitivity_n": [1, 10, 100], "sensitivity_trials": 10, "curves": true}
    })";
    std::vector<std::pair<fs::path, std::size_t>> runs{{work_ / "run_a", 1}, {work_ / "run_b", 1}, {work_ / "run_c", 3}};
    for (const auto& [dir, jobs] : runs) {
      const std::string error = pipeline(patch, dir, jobs);
      if (!error.empty()) return {false, "pipeline failed: " + error};
    }
    std::size_t files = 0;
    std::vector<std::string> differing;
    const auto listing = [](const fs::path& root) {
      std::set<fs::path> out;
      for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out.insert(fs::relative(e.path(), root));
      }
      return out;
    };
    const auto reference = listing(runs[0].first);
    for (std::size_t r = 1; r < runs.size(); ++r) {
      if (listing(runs[r].first) != reference) differing.push_back(runs[r].first.filename().string() + ":listing");
      for (const fs::path& rel : reference) {
        if (!fs::exists(runs[r].first / rel)) continue;
        if (!same_artifact(runs[0].first / rel, runs[r].first / rel)) {
          differing.push_back(runs[r].first.filename().string() + ":" + rel.string());
        }
      }
    }
    files = reference.size();
    std::string diff;
    for (const auto& d : differing) diff += " " + d;
    return {differing.empty() && files > 0, "runs=3 jobs=1,1,3 files=" + std::to_string(files) + " differing=" +
                                                std::to_string(differing.size()) + diff};
  }

 private:
  const std::vector<AttributionMap>& fitted_maps() {
    if (!fitted_) {
      const auto start = Clock::now();
      std::span<const SyntheticSample> samples(data_.heldout.data(), kHeldoutSamples);
      const AttributionContext context = make_context(config_, model_, data_.train);
      fitted_ = attribute_samples(model_, samples, context, 1);
      attribution_seconds_ = seconds_since(start);
    }
    return *fitted_;
  }

  const LayerComparison& layer_comparison() {
    if (!layers_) {
      std::span<const SyntheticSample> samples(data_.heldout.data(), kLayerSamples);
      layers_ = compare_layers(model_, samples, config_, data_.train, 1);
    }
    return *layers_;
  }

  // Map sidecars carry wall-clock runtime, which is excluded.
  static bool same_artifact(const fs::path& a, const fs::path& b) {
    const std::string x = read_file(a);
    const std::string y = read_file(b);
    if (a.extension() == ".json" && a.filename().string().rfind("map_", 0) == 0) {
      auto jx = nlohmann::json::parse(x);
      auto jy = nlohmann::json::parse(y);
      jx.erase("runtime_ms");
      jy.erase("runtime_ms");
      return jx == jy;
    }
    return x == y;
  }

  static std::string pipeline(const char* patch, const fs::path& dir, std::size_t jobs) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    coiba_config* config = nullptr;
    coiba_dataset* train = nullptr;
    coiba_dataset* heldout = nullptr;
    coiba_dataset* eval = nullptr;
    coiba_model* model = nullptr;
    coiba_maps* maps = nullptr;
    coiba_maps* loaded = nullptr;
    char* log = nullptr;
    std::string error;
    auto ok = [&](coiba_status status) {
      if (status != COIBA_OK && error.empty()) error = coiba_last_error();
      return status == COIBA_OK;
    };
    const std::size_t samples = 8;
    if (ok(coiba_config_default(&config)) && ok(coiba_config_merge(config, patch)) &&
        ok(coiba_dataset_generate(config, &train, &heldout)) &&
        ok(coiba_model_train(config, train, heldout, &model, nullptr, &log)) &&
        ok(coiba_model_save(model, (dir / "model.cibt").c_str())) &&
        ok(coiba_dataset_slice(heldout, 0, samples, &eval)) && ok(coiba_dataset_save(eval, (dir / "data").c_str())) &&
        ok(coiba_attribute(model, eval, config, nullptr, jobs, &maps)) &&
        ok(coiba_maps_save(maps, (dir / "maps").c_str())) &&
        ok(coiba_maps_load((dir / "maps").c_str(), eval, config, &loaded)) &&
        ok(coiba_evaluate(model, eval, loaded, config, jobs, (dir / "eval").c_str(), nullptr))) {
      write_file_atomic(dir / "train_log.csv", log);
    }
    coiba_string_free(log);
    coiba_maps_free(loaded);
    coiba_maps_free(maps);
    coiba_model_free(model);
    coiba_dataset_free(eval);
    coiba_dataset_free(heldout);
    coiba_dataset_free(train);
    coiba_config_free(config);
    return error;
  }

  RunConfig config_;
  ModelCheckpoint model_;
  SplitDataset data_;
  fs::path work_;
  std::optional<std::vector<AttributionMap>> fitted_;
  double attribution_seconds_ = 0.0;
  std::optional<LayerComparison> layers_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks on the trained toy model"};
  std::string checkpoint;
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "coiba_acceptance").string();
  app.add_option("--checkpoint", checkpoint, "Use this trained model instead of training one");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work-dir", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig config = default_config();
    SplitDataset data = make_dataset(config);
    const auto start = Clock::now();
    ModelCheckpoint model = checkpoint.empty() ? train_from_config(config, data).model : load_checkpoint(checkpoint);
    std::cout << "model: heldout_accuracy=" << fmt(accuracy(model, data.heldout))
              << " mask_zeroed_accuracy=" << fmt(masked_accuracy(model, data.heldout)) << " digest="
              << checkpoint_digest(model) << " ready_s=" << fmt(seconds_since(start), 4) << std::endl;

    Suite suite(config, std::move(model), std::move(data), work);
    const std::vector<std::function<Outcome()>> criteria{
        [&] { return suite.gradient_oracle(); },   [&] { return suite.kl_oracle(); },
        [&] { return suite.transparency(); },      [&] { return suite.localization(); },
        [&] { return suite.faithfulness(); },      [&] { return suite.layer_discrepancy(); },
        [&] { return suite.beta_ablation(); },     [&] { return suite.sanity(); },
        [&] { return suite.metric_contracts(); },  [&] { return suite.determinism(); },
    };
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
      const int number = static_cast<int>(i + 1);
      if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
      Outcome outcome;
      try {
        outcome = criteria[i]();
      } catch (const std::exception& e) {
        outcome = {false, std::string("error: ") + e.what()};
      }
      all = all && outcome.pass;
      std::cout << "criterion " << number << ": " << (outcome.pass ? "PASS" : "FAIL") << " " << outcome.detail
                << std::endl;
    }
    fs::remove_all(work);
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
