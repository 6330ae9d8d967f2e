#include "coiba/coiba.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "coiba/config.hpp"
#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/studies.hpp"

struct coiba_config {
  coiba::RunConfig value;
};
struct coiba_model {
  coiba::ModelCheckpoint value;
};
struct coiba_dataset {
  std::vector<coiba::SyntheticSample> value;
};
struct coiba_maps {
  std::vector<coiba::AttributionMap> value;
};

namespace {

thread_local std::string last_error;
thread_local std::string last_kind;

coiba_status status_for(coiba::ErrorKind kind) {
  switch (kind) {
    case coiba::ErrorKind::Config: return COIBA_ERR_CONFIG;
    case coiba::ErrorKind::Io:
    case coiba::ErrorKind::Parse: return COIBA_ERR_IO;
    default: return COIBA_ERR_RUNTIME;
  }
}

template <typename F>
coiba_status guarded(F&& f) {
  try {
    f();
    last_error.clear();
    last_kind.clear();
    return COIBA_OK;
  } catch (const coiba::Error& e) {
    last_error = e.what();
    last_kind = coiba::to_string(e.kind());
    return status_for(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    last_kind = "runtime";
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    last_kind = "io";
    return COIBA_ERR_IO;
  } catch (const std::exception& e) {
    last_error = e.what();
    last_kind = "runtime";
  }
  return COIBA_ERR_RUNTIME;
}

template <typename T>
const T& need(const T* p, const char* what) {
  if (!p) coiba::fail(coiba::ErrorKind::Contract, std::string(what) + " is NULL");
  return *p;
}

std::string need(const char* p, const char* what) {
  if (!p) coiba::fail(coiba::ErrorKind::Contract, std::string(what) + " is NULL");
  return p;
}

template <typename T>
T* need_out(T* p, const char* what) {
  if (!p) coiba::fail(coiba::ErrorKind::Contract, std::string("output pointer ") + what + " is NULL");
  return p;
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void maybe_out(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

std::filesystem::path map_stem(const std::filesystem::path& dir, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "map_%05zu", i);
  return dir / name;
}

std::filesystem::path prepare_dir(const char* dir) {
  if (!dir || !*dir) coiba::fail(coiba::ErrorKind::Config, "output directory is empty");
  std::filesystem::path p(dir);
  std::filesystem::create_directories(p);
  return p;
}

// Resolved config plus digest next to every study output.
void echo_config(const std::filesystem::path& dir, const coiba::RunConfig& config) {
  coiba::write_file_atomic(dir / "config.json", coiba::run_config_to_json(config));
  coiba::write_file_atomic(dir / "config.digest", coiba::config_digest(config) + "\n");
}

std::span<const coiba::SyntheticSample> optional_samples(const coiba_dataset* d) {
  return d ? std::span<const coiba::SyntheticSample>(d->value) : std::span<const coiba::SyntheticSample>();
}

}  // namespace

extern "C" {

const char* coiba_version(void) { return "0.1.0"; }
const char* coiba_last_error(void) { return last_error.c_str(); }
const char* coiba_last_error_kind(void) { return last_kind.c_str(); }
void coiba_string_free(char* text) { std::free(text); }

coiba_status coiba_config_default(coiba_config** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_config{coiba::default_config()}; });
}

coiba_status coiba_config_parse(const char* json, coiba_config** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_config{coiba::parse_config(need(json, "json"))}; });
}

coiba_status coiba_config_load(const char* path, coiba_config** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_config{coiba::load_config(need(path, "path"))}; });
}

coiba_status coiba_config_merge(coiba_config* config, const char* json_patch) {
  return guarded([&] {
    coiba_config& c = const_cast<coiba_config&>(need(config, "config"));
    nlohmann::json patch;
    try {
      patch = nlohmann::json::parse(need(json_patch, "json_patch"));
    } catch (const nlohmann::json::exception& e) {
      coiba::fail(coiba::ErrorKind::Config, std::string("patch is not valid JSON: ") + e.what());
    }
    nlohmann::json doc = nlohmann::json::parse(coiba::run_config_to_json(c.value));
    // a last layer that followed the depth keeps following it
    const bool depth_patched = patch.is_object() && patch.contains("model") && patch["model"].is_object() &&
                               patch["model"].contains("depth");
    const bool last_patched = patch.is_object() && patch.contains("bottleneck") && patch["bottleneck"].is_object() &&
                              patch["bottleneck"].contains("last_layer");
    if (depth_patched && !last_patched && c.value.bottleneck.last_layer == c.value.model.depth) {
      doc["bottleneck"].erase("last_layer");
    }
    doc.merge_patch(patch);
    c.value = coiba::parse_config(doc.dump());
  });
}

coiba_status coiba_config_to_json(const coiba_config* config, char** out) {
  return guarded([&] { *need_out(out, "out") = dup(coiba::run_config_to_json(need(config, "config").value)); });
}

coiba_status coiba_config_digest(const coiba_config* config, char** out) {
  return guarded([&] { *need_out(out, "out") = dup(coiba::config_digest(need(config, "config").value)); });
}

void coiba_config_free(coiba_config* config) { delete config; }

coiba_status coiba_dataset_generate(const coiba_config* config, coiba_dataset** train, coiba_dataset** heldout) {
  return guarded([&] {
    coiba::SplitDataset split = coiba::make_dataset(need(config, "config").value);
    auto* t = new coiba_dataset{std::move(split.train)};
    auto* h = new coiba_dataset{std::move(split.heldout)};
    if (train) *train = t; else delete t;
    if (heldout) *heldout = h; else delete h;
  });
}

coiba_status coiba_dataset_load(const char* manifest_path, coiba_dataset** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_dataset{coiba::load_manifest(need(manifest_path, "path"))}; });
}

coiba_status coiba_dataset_save(const coiba_dataset* dataset, const char* dir) {
  return guarded([&] { coiba::save_dataset(prepare_dir(dir), need(dataset, "dataset").value); });
}

size_t coiba_dataset_size(const coiba_dataset* dataset) { return dataset ? dataset->value.size() : 0; }

coiba_status coiba_dataset_slice(const coiba_dataset* dataset, size_t first, size_t count, coiba_dataset** out) {
  return guarded([&] {
    const auto& v = need(dataset, "dataset").value;
    const std::size_t begin = std::min(first, v.size());
    const std::size_t end = std::min(v.size(), begin + std::min(count, v.size() - begin));
    *need_out(out, "out") = new coiba_dataset{{v.begin() + static_cast<std::ptrdiff_t>(begin),
                                               v.begin() + static_cast<std::ptrdiff_t>(end)}};
  });
}

void coiba_dataset_free(coiba_dataset* dataset) { delete dataset; }

coiba_status coiba_model_init(const coiba_config* config, coiba_model** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_model{coiba::init_model(need(config, "config").value.model)}; });
}

coiba_status coiba_model_train(const coiba_config* config, const coiba_dataset* train, const coiba_dataset* heldout,
                               coiba_model** out, double* heldout_accuracy, char** log_csv) {
  return guarded([&] {
    need_out(out, "out");
    coiba::SplitDataset split{need(train, "train").value, need(heldout, "heldout").value};
    coiba::TrainResult result = coiba::train_from_config(need(config, "config").value, split);
    std::string log = "epoch,loss,train_accuracy,heldout_accuracy\n";
    char line[160];
    for (const auto& e : result.log) {
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.loss, e.train_accuracy,
                    e.heldout_accuracy);
      log += line;
    }
    if (heldout_accuracy) *heldout_accuracy = result.heldout_accuracy;
    maybe_out(log_csv, log);
    *out = new coiba_model{std::move(result.model)};
  });
}

coiba_status coiba_model_load(const char* path, coiba_model** out) {
  return guarded([&] { *need_out(out, "out") = new coiba_model{coiba::load_checkpoint(need(path, "path"))}; });
}

coiba_status coiba_model_save(const coiba_model* model, const char* path) {
  return guarded([&] { coiba::save_checkpoint(need(model, "model").value, need(path, "path")); });
}

coiba_status coiba_model_digest(const coiba_model* model, char** out) {
  return guarded([&] { *need_out(out, "out") = dup(coiba::checkpoint_digest(need(model, "model").value)); });
}

coiba_status coiba_model_accuracy(const coiba_model* model, const coiba_dataset* dataset, double* out) {
  return guarded([&] { *need_out(out, "out") = coiba::accuracy(need(model, "model").value, need(dataset, "dataset").value); });
}

void coiba_model_free(coiba_model* model) { delete model; }

coiba_status coiba_attribute(const coiba_model* model, const coiba_dataset* samples, const coiba_config* config,
                             const coiba_dataset* calibration, size_t jobs, coiba_maps** out) {
  return guarded([&] {
    need_out(out, "out");
    const auto& m = need(model, "model").value;
    const auto& c = need(config, "config").value;
    const coiba::AttributionContext context = coiba::make_context(c, m, optional_samples(calibration));
    auto maps = coiba::attribute_samples(m, need(samples, "samples").value, context, jobs);
    *out = new coiba_maps{std::move(maps)};
  });
}

size_t coiba_maps_size(const coiba_maps* maps) { return maps ? maps->value.size() : 0; }

coiba_status coiba_maps_token_scores(const coiba_maps* maps, size_t index, const double** scores, size_t* count) {
  return guarded([&] {
    const auto& v = need(maps, "maps").value;
    if (index >= v.size()) coiba::fail(coiba::ErrorKind::Index, "map index " + std::to_string(index) + " out of range");
    *need_out(scores, "scores") = v[index].token_scores.data();
    *need_out(count, "count") = v[index].token_scores.size();
  });
}

coiba_status coiba_maps_runtime_ms(const coiba_maps* maps, size_t index, double* out) {
  return guarded([&] {
    const auto& v = need(maps, "maps").value;
    if (index >= v.size()) coiba::fail(coiba::ErrorKind::Index, "map index " + std::to_string(index) + " out of range");
    *need_out(out, "out") = v[index].runtime_ms;
  });
}

coiba_status coiba_maps_layer_capacity(const coiba_maps* maps, size_t index, const double** values, size_t* count) {
  return guarded([&] {
    const auto& v = need(maps, "maps").value;
    if (index >= v.size()) coiba::fail(coiba::ErrorKind::Index, "map index " + std::to_string(index) + " out of range");
    *need_out(values, "values") = v[index].layer_capacity.data();
    *need_out(count, "count") = v[index].layer_capacity.size();
  });
}

coiba_status coiba_maps_upper_bound_holds(const coiba_maps* maps, size_t index, int* out) {
  return guarded([&] {
    const auto& v = need(maps, "maps").value;
    if (index >= v.size()) coiba::fail(coiba::ErrorKind::Index, "map index " + std::to_string(index) + " out of range");
    *need_out(out, "out") = coiba::upper_bound_holds(v[index]) ? 1 : 0;
  });
}

coiba_status coiba_maps_save(const coiba_maps* maps, const char* dir) {
  return guarded([&] {
    const std::filesystem::path root = prepare_dir(dir);
    const auto& v = need(maps, "maps").value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::filesystem::path stem = map_stem(root, i);
      coiba::save_attribution(v[i], stem.string() + ".pgm", stem.string() + ".json");
    }
  });
}

coiba_status coiba_maps_load(const char* dir, const coiba_dataset* samples, const coiba_config* config,
                             coiba_maps** out) {
  return guarded([&] {
    need_out(out, "out");
    const std::filesystem::path root(need(dir, "dir"));
    const auto& c = need(config, "config").value;
    std::vector<coiba::AttributionMap> maps;
    for (std::size_t i = 0; i < need(samples, "samples").value.size(); ++i) {
      const std::filesystem::path path = map_stem(root, i).string() + ".json";
      if (!std::filesystem::exists(path)) coiba::fail(coiba::ErrorKind::Io, "missing map file " + path.string());
      maps.push_back(coiba::load_attribution_sidecar(path, c.model.image_size, c.upsample));
    }
    *out = new coiba_maps{std::move(maps)};
  });
}

void coiba_maps_free(coiba_maps* maps) { delete maps; }

coiba_status coiba_evaluate(const coiba_model* model, const coiba_dataset* samples, const coiba_maps* maps,
                            const coiba_config* config, size_t jobs, const char* out_dir, char** summary_json) {
  return guarded([&] {
    const auto& c = need(config, "config").value;
    const coiba::EvaluationReport report = coiba::evaluate_maps(need(model, "model").value, need(samples, "samples").value,
                                                                need(maps, "maps").value, c, jobs);
    const std::filesystem::path root = prepare_dir(out_dir);
    const std::string summary = coiba::evaluation_summary_json(report);
    coiba::write_file_atomic(root / "results.csv", coiba::evaluation_csv(report));
    coiba::write_file_atomic(root / "summary.json", summary);
    if (c.evaluation.curves) {
      std::filesystem::create_directories(root / "curves");
      for (const auto& s : report.samples) {
        coiba::write_file_atomic(root / "curves" / ("curve_" + s.id + ".dat"), coiba::curve_dat(s));
      }
    }
    echo_config(root, c);
    maybe_out(summary_json, summary);
  });
}

coiba_status coiba_compare_layers(const coiba_model* model, const coiba_dataset* samples, const coiba_config* config,
                                  const coiba_dataset* calibration, size_t jobs, const char* out_dir,
                                  char** summary_json) {
  return guarded([&] {
    const auto& c = need(config, "config").value;
    const coiba::LayerComparison result = coiba::compare_layers(need(model, "model").value, need(samples, "samples").value,
                                                                c, optional_samples(calibration), jobs);
    const std::filesystem::path root = prepare_dir(out_dir);
    coiba::write_file_atomic(root / "layers.csv", coiba::layer_comparison_csv(result));
    std::string per_sample = "id,best_layer";
    for (std::size_t l : result.layers) per_sample += ",delta_insdel_l" + std::to_string(l);
    per_sample += "\n";
    char buf[32];
    for (std::size_t i = 0; i < result.best_layer.size(); ++i) {
      per_sample += std::to_string(i) + "," + std::to_string(result.best_layer[i]);
      for (double v : result.delta_insdel[i]) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        per_sample += buf;
      }
      per_sample += "\n";
    }
    coiba::write_file_atomic(root / "per_sample.csv", per_sample);
    nlohmann::ordered_json j;
    j["config_digest"] = coiba::config_digest(c);
    j["samples"] = result.best_layer.size();
    j["layers"] = result.layers;
    j["ssim"] = result.ssim;
    j["best_counts"] = result.best_counts;
    j["distance_spearman"] = result.distance_spearman ? nlohmann::json(*result.distance_spearman) : nlohmann::json();
    const std::string summary = j.dump(2) + "\n";
    coiba::write_file_atomic(root / "summary.json", summary);
    echo_config(root, c);
    maybe_out(summary_json, summary);
  });
}

coiba_status coiba_sanity_check(const coiba_model* model, const coiba_dataset* samples, const coiba_config* config,
                                const coiba_dataset* calibration, size_t jobs, const char* out_dir,
                                char** summary_json) {
  return guarded([&] {
    const auto& c = need(config, "config").value;
    const auto rows = coiba::sanity_check(need(model, "model").value, need(samples, "samples").value, c,
                                          optional_samples(calibration), jobs);
    const std::filesystem::path root = prepare_dir(out_dir);
    coiba::write_file_atomic(root / "sanity.csv", coiba::sanity_csv(rows, c.studies.sanity_mode));
    nlohmann::ordered_json j;
    j["config_digest"] = coiba::config_digest(c);
    j["mode"] = coiba::to_string(c.studies.sanity_mode);
    nlohmann::ordered_json table = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      table.push_back({{"layer_index", r.layer_index ? nlohmann::json(*r.layer_index) : nlohmann::json()},
                       {"mean_ssim", r.mean_ssim}});
    }
    j["rows"] = table;
    const std::string summary = j.dump(2) + "\n";
    coiba::write_file_atomic(root / "summary.json", summary);
    echo_config(root, c);
    maybe_out(summary_json, summary);
  });
}

coiba_status coiba_ablate(const coiba_model* model, const coiba_dataset* samples, const coiba_config* config,
                          const char* axis, const coiba_dataset* calibration, size_t jobs, const char* out_dir,
                          char** summary_json) {
  return guarded([&] {
    const auto& c = need(config, "config").value;
    const coiba::AblationAxis a = coiba::parse_ablation_axis(need(axis, "axis"));
    const auto rows = coiba::ablate(need(model, "model").value, need(samples, "samples").value, c, a,
                                    optional_samples(calibration), jobs);
    const std::filesystem::path root = prepare_dir(out_dir);
    coiba::write_file_atomic(root / (coiba::to_string(a) + ".csv"), coiba::ablation_csv(rows, a));
    nlohmann::ordered_json j;
    j["config_digest"] = coiba::config_digest(c);
    j["axis"] = coiba::to_string(a);
    nlohmann::ordered_json table = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      table.push_back({{"setting", r.setting},
                       {"mean_delta_insdel", r.mean_delta_insdel},
                       {"accuracy", r.accuracy},
                       {"samples", r.samples}});
    }
    j["rows"] = table;
    const std::string summary = j.dump(2) + "\n";
    coiba::write_file_atomic(root / ("summary_" + coiba::to_string(a) + ".json"), summary);
    echo_config(root, c);
    maybe_out(summary_json, summary);
  });
}

}  // extern "C"
