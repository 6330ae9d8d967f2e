// coiba command line tool. Talks to the library only through coiba.h.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coiba/coiba.h"

namespace {

using json = nlohmann::json;

// Thrown after a failed C call; carries the exit code.
struct Failure {
  int code;
  std::string kind;
  std::string message;
};

void check(coiba_status status) {
  if (status != COIBA_OK) throw Failure{static_cast<int>(status), coiba_last_error_kind(), coiba_last_error()};
}

[[noreturn]] void config_error(const std::string& message) { throw Failure{COIBA_ERR_CONFIG, "config", message}; }

std::string take(char* text) {
  std::string s = text ? text : "";
  coiba_string_free(text);
  return s;
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Config = Handle<coiba_config, coiba_config_free>;
using Model = Handle<coiba_model, coiba_model_free>;
using Dataset = Handle<coiba_dataset, coiba_dataset_free>;
using Maps = Handle<coiba_maps, coiba_maps_free>;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Failure{COIBA_ERR_IO, "io", "cannot write " + path.string()};
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t jobs = 1;
  std::string checkpoint;
  std::string images;
  std::optional<std::size_t> limit;
};

struct AttributeFlags {
  std::string method;
  std::optional<std::size_t> s_layer, e_layer, iterations;
  std::optional<double> beta;
  std::string readout;
};

struct Context {
  Config config;
  json resolved;
  std::filesystem::path out_dir;
};

void load_context(const Common& common, const json& patch, Context& ctx) {
  if (common.config_path.empty()) {
    check(coiba_config_default(ctx.config.out()));
  } else {
    check(coiba_config_load(common.config_path.c_str(), ctx.config.out()));
  }
  json p = patch;
  if (common.seed) p["seed"] = *common.seed;
  if (!p.is_null() && !p.empty()) check(coiba_config_merge(ctx.config.get(), p.dump().c_str()));
  char* text = nullptr;
  check(coiba_config_to_json(ctx.config.get(), &text));
  ctx.resolved = json::parse(take(text));

  std::string dir = common.out_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("COIBA_OUT_DIR")) dir = env;
  }
  if (dir.empty()) config_error("no output directory (use --out-dir or COIBA_OUT_DIR)");
  ctx.out_dir = dir;
  std::error_code ec;
  std::filesystem::create_directories(ctx.out_dir, ec);
  if (ec) throw Failure{COIBA_ERR_IO, "io", "cannot create " + ctx.out_dir.string() + ": " + ec.message()};
}

void echo_config(const Context& ctx) {
  char* digest = nullptr;
  check(coiba_config_digest(ctx.config.get(), &digest));
  write_text(ctx.out_dir / "config.json", ctx.resolved.dump(2) + "\n");
  write_text(ctx.out_dir / "config.digest", take(digest) + "\n");
}

std::string path_or(const std::string& flag, const json& resolved, const char* key) {
  if (!flag.empty()) return flag;
  return resolved["paths"][key].get<std::string>();
}

void load_model(const Common& common, const Context& ctx, Model& model) {
  const std::string path = path_or(common.checkpoint, ctx.resolved, "checkpoint");
  if (path.empty()) config_error("no checkpoint (use --checkpoint or paths.checkpoint)");
  check(coiba_model_load(path.c_str(), model.out()));
}

// Images from a manifest, or the held-out split regenerated from the config.
void load_images(const Common& common, const Context& ctx, std::size_t count, Dataset& out) {
  const std::string manifest = path_or(common.images, ctx.resolved, "dataset");
  Dataset all;
  if (manifest.empty()) {
    check(coiba_dataset_generate(ctx.config.get(), nullptr, all.out()));
  } else {
    check(coiba_dataset_load(manifest.c_str(), all.out()));
  }
  check(coiba_dataset_slice(all.get(), 0, count, out.out()));
}

// Training split, needed only for calibration statistics.
void load_calibration(const Context& ctx, Dataset& out) {
  if (ctx.resolved["bottleneck"]["stats_mode"] == "calibration") {
    check(coiba_dataset_generate(ctx.config.get(), out.out(), nullptr));
  }
}

json attribute_patch(const AttributeFlags& f, const json& base_bottleneck) {
  json b = json::object();
  if (!f.method.empty()) b["mode"] = f.method;
  if (f.s_layer) b["first_layer"] = *f.s_layer;
  if (f.e_layer) b["last_layer"] = *f.e_layer;
  if (f.beta) b["beta"] = *f.beta;
  if (f.iterations) b["iterations"] = *f.iterations;
  if (!f.readout.empty()) b["readout"] = f.readout;
  // Single-layer IBA defaults to the first layer of the range.
  if (f.method == "iba" && !f.e_layer) {
    b["last_layer"] = f.s_layer ? json(*f.s_layer) : base_bottleneck["first_layer"];
  }
  return b.empty() ? json() : json{{"bottleneck", b}};
}

std::size_t sample_count(const Context& ctx, const char* section) { return ctx.resolved[section]["samples"]; }

void print_summary_line(const char* label, const std::string& summary) {
  std::printf("%s %s\n", label, json::parse(summary).dump().c_str());
}

int cmd_train(const Common& common, std::optional<std::size_t> epochs) {
  Context ctx;
  json patch;
  if (epochs) patch["training"]["epochs"] = *epochs;
  load_context(common, patch, ctx);
  Dataset train, heldout;
  check(coiba_dataset_generate(ctx.config.get(), train.out(), heldout.out()));
  Model model;
  double accuracy = 0.0;
  char* log = nullptr;
  check(coiba_model_train(ctx.config.get(), train.get(), heldout.get(), model.out(), &accuracy, &log));
  write_text(ctx.out_dir / "train_log.csv", take(log));
  const std::string checkpoint = (ctx.out_dir / "model.cibt").string();
  check(coiba_model_save(model.get(), checkpoint.c_str()));
  check(coiba_dataset_save(heldout.get(), (ctx.out_dir / "heldout").string().c_str()));
  echo_config(ctx);
  char* digest = nullptr;
  check(coiba_model_digest(model.get(), &digest));
  std::printf("heldout_accuracy %.4f\n", accuracy);
  std::printf("checkpoint %s\n", checkpoint.c_str());
  std::printf("checkpoint_digest %s\n", take(digest).c_str());
  return 0;
}

int cmd_attribute(const Common& common, const AttributeFlags& flags) {
  Context ctx;
  json patch;
  if (common.limit) patch["evaluation"]["samples"] = *common.limit;
  load_context(common, patch, ctx);
  json ap = attribute_patch(flags, ctx.resolved["bottleneck"]);
  if (!ap.is_null()) {
    check(coiba_config_merge(ctx.config.get(), ap.dump().c_str()));
    char* text = nullptr;
    check(coiba_config_to_json(ctx.config.get(), &text));
    ctx.resolved = json::parse(take(text));
  }
  Model model;
  load_model(common, ctx, model);
  Dataset images, calibration;
  load_images(common, ctx, sample_count(ctx, "evaluation"), images);
  load_calibration(ctx, calibration);
  Maps maps;
  check(coiba_attribute(model.get(), images.get(), ctx.config.get(), calibration.get(), common.jobs, maps.out()));
  check(coiba_maps_save(maps.get(), ctx.out_dir.string().c_str()));
  echo_config(ctx);
  double total_ms = 0.0;
  std::size_t bound_holds = 0;
  const std::size_t n = coiba_maps_size(maps.get());
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    int holds = 0;
    check(coiba_maps_runtime_ms(maps.get(), i, &ms));
    check(coiba_maps_upper_bound_holds(maps.get(), i, &holds));
    total_ms += ms;
    bound_holds += holds ? 1 : 0;
  }
  std::printf("maps %zu\n", n);
  std::printf("mean_runtime_ms %.1f\n", n ? total_ms / static_cast<double>(n) : 0.0);
  // first-layer capacity >= mean over hooked layers; a diagnostic, not a check
  std::printf("upper_bound_holds %zu/%zu\n", bound_holds, n);
  return 0;
}

int cmd_evaluate(const Common& common, const std::string& maps_dir, const std::string& metrics, bool curves) {
  Context ctx;
  json patch;
  if (common.limit) patch["evaluation"]["samples"] = *common.limit;
  if (!metrics.empty()) {
    std::vector<std::string> list;
    std::stringstream ss(metrics);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) list.push_back(item);
    }
    patch["evaluation"]["metrics"] = list;
  }
  if (curves) patch["evaluation"]["curves"] = true;
  load_context(common, patch, ctx);
  const std::string dir = path_or(maps_dir, ctx.resolved, "maps");
  if (dir.empty()) config_error("no maps directory (use --maps or paths.maps)");
  Model model;
  load_model(common, ctx, model);
  Dataset images;
  load_images(common, ctx, sample_count(ctx, "evaluation"), images);
  Maps maps;
  check(coiba_maps_load(dir.c_str(), images.get(), ctx.config.get(), maps.out()));
  char* summary = nullptr;
  check(coiba_evaluate(model.get(), images.get(), maps.get(), ctx.config.get(), common.jobs,
                       ctx.out_dir.string().c_str(), &summary));
  print_summary_line("summary", take(summary));
  return 0;
}

enum class Study { Layers, Sanity, Ablate };

int cmd_study(const Common& common, Study study, const std::string& axis, const std::string& sanity_mode) {
  Context ctx;
  json patch;
  if (common.limit) patch["studies"]["samples"] = *common.limit;
  if (!sanity_mode.empty()) patch["studies"]["sanity_mode"] = sanity_mode;
  load_context(common, patch, ctx);
  Model model;
  load_model(common, ctx, model);
  Dataset images, calibration;
  load_images(common, ctx, sample_count(ctx, "studies"), images);
  load_calibration(ctx, calibration);
  const std::string out = ctx.out_dir.string();
  char* summary = nullptr;
  switch (study) {
    case Study::Layers:
      check(coiba_compare_layers(model.get(), images.get(), ctx.config.get(), calibration.get(), common.jobs,
                                 out.c_str(), &summary));
      break;
    case Study::Sanity:
      check(coiba_sanity_check(model.get(), images.get(), ctx.config.get(), calibration.get(), common.jobs,
                               out.c_str(), &summary));
      break;
    case Study::Ablate:
      check(coiba_ablate(model.get(), images.get(), ctx.config.get(), axis.c_str(), calibration.get(), common.jobs,
                         out.c_str(), &summary));
      break;
  }
  print_summary_line("summary", take(summary));
  return 0;
}

void add_common(CLI::App* app, Common& c, bool needs_model) {
  app->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Master seed (overrides the config)");
  app->add_option("--out-dir", c.out_dir, "Output directory (default: $COIBA_OUT_DIR)");
  app->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  if (needs_model) {
    app->add_option("--checkpoint", c.checkpoint, "Model checkpoint (default: paths.checkpoint)");
    app->add_option("--images", c.images, "Dataset manifest.csv (default: regenerated held-out split)");
    app->add_option("--limit", c.limit, "Number of images to use");
  }
}

std::string one_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Information bottleneck attribution for a tiny vision transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", coiba_version());

  Common common;
  std::optional<std::size_t> epochs;
  AttributeFlags attr;
  std::string maps_dir, metrics, axis, sanity_mode;
  bool curves = false;

  auto* train = app.add_subcommand("train-toy", "Train the toy model on synthetic data");
  add_common(train, common, false);
  train->add_option("--epochs", epochs, "Training epochs (overrides the config)");

  auto* attribute = app.add_subcommand("attribute", "Write attribution maps for a set of images");
  add_common(attribute, common, true);
  attribute->add_option("--method", attr.method, "iba | iba-star | coiba")
      ->check(CLI::IsMember({"iba", "iba-star", "iba_star", "coiba", "coiba_per_layer_beta"}));
  attribute->add_option("--s-layer", attr.s_layer, "First bottlenecked layer (1-based)");
  attribute->add_option("--e-layer", attr.e_layer, "Last bottlenecked layer (1-based)");
  attribute->add_option("--beta", attr.beta, "Compression weight");
  attribute->add_option("--iterations", attr.iterations, "Optimization steps");
  attribute->add_option("--readout", attr.readout, "first_layer_capacity | capacity_mean | lambda");

  auto* evaluate = app.add_subcommand("evaluate", "Score attribution maps with faithfulness metrics");
  add_common(evaluate, common, true);
  evaluate->add_option("--maps", maps_dir, "Directory written by attribute (default: paths.maps)");
  evaluate->add_option("--metrics", metrics, "Comma list of insdel,road,ehr,sensitivity");
  evaluate->add_flag("--curves", curves, "Write per-sample insertion/deletion curves");

  auto* layers = app.add_subcommand("compare-layers", "Per-layer IBA maps, SSIM matrix and best-layer counts");
  add_common(layers, common, true);

  auto* sanity = app.add_subcommand("sanity-check", "Map similarity under parameter randomization");
  add_common(sanity, common, true);
  sanity->add_option("--mode", sanity_mode, "cumulative | independent")
      ->check(CLI::IsMember({"cumulative", "independent"}));

  auto* ablate = app.add_subcommand("ablate", "Sweep one bottleneck setting");
  add_common(ablate, common, true);
  ablate->add_option("--axis", axis, "beta | layers | uniform-channel | readout")
      ->required()
      ->check(CLI::IsMember({"beta", "layers", "uniform-channel", "readout"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
    return COIBA_ERR_CONFIG;
  }

  try {
    if (*train) return cmd_train(common, epochs);
    if (*attribute) return cmd_attribute(common, attr);
    if (*evaluate) return cmd_evaluate(common, maps_dir, metrics, curves);
    if (*layers) return cmd_study(common, Study::Layers, "", "");
    if (*sanity) return cmd_study(common, Study::Sanity, "", sanity_mode);
    if (*ablate) return cmd_study(common, Study::Ablate, axis, "");
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s: %s\n", f.kind.c_str(), one_line(f.message).c_str());
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: runtime: %s\n", one_line(e.what()).c_str());
    return COIBA_ERR_RUNTIME;
  }
  return 0;
}
