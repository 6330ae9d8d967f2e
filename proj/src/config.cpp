#include "coiba/config.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

using nlohmann::json;

// Collects every schema problem before failing.
class Reader {
 public:
  void problem(std::string text) { problems_.push_back(std::move(text)); }
  const std::vector<std::string>& problems() const { return problems_; }

  // Flags keys of `object` not in `allowed`; returns false if `object` is not an object.
  bool keys(const json& object, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!object.is_object()) {
      problem(where + " must be an object");
      return false;
    }
    const std::set<std::string> known(allowed.begin(), allowed.end());
    for (const auto& [key, value] : object.items()) {
      if (!known.count(key)) problem("unknown key \"" + (where.empty() ? key : where + "." + key) + "\"");
    }
    return true;
  }

  template <typename T>
  void get(const json& object, const std::string& where, const char* key, T& out) {
    if (!object.contains(key)) return;
    const std::string name = where.empty() ? key : where + "." + key;
    const json& v = object.at(key);
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
          problem(name + " must be a non-negative integer");
          return;
        }
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) {
          problem(name + " must be a number");
          return;
        }
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) {
          problem(name + " must be true or false");
          return;
        }
      }
      out = v.get<T>();
    } catch (const json::exception&) {
      problem(name + " has the wrong type");
    }
  }

  template <typename Parse, typename T>
  void get_enum(const json& object, const std::string& where, const char* key, Parse parse, T& out) {
    if (!object.contains(key)) return;
    const std::string name = where + "." + key;
    if (!object.at(key).is_string()) {
      problem(name + " must be a string");
      return;
    }
    try {
      out = parse(object.at(key).get<std::string>());
    } catch (const Error& e) {
      problem(name + ": " + e.what());
    }
  }

 private:
  std::vector<std::string> problems_;
};

TargetMode parse_target_mode(const std::string& text) {
  if (text == "ground_truth") return TargetMode::GroundTruth;
  if (text == "predicted") return TargetMode::Predicted;
  fail(ErrorKind::Config, "unknown target mode \"" + text + "\" (ground_truth|predicted)");
}

RandomizeMode parse_randomize_mode(const std::string& text) {
  if (text == "cumulative") return RandomizeMode::Cumulative;
  if (text == "independent") return RandomizeMode::Independent;
  fail(ErrorKind::Config, "unknown randomize mode \"" + text + "\" (cumulative|independent)");
}

UpsampleMode parse_upsample_mode(const std::string& text) {
  if (text == "bilinear") return UpsampleMode::Bilinear;
  if (text == "nearest") return UpsampleMode::Nearest;
  fail(ErrorKind::Config, "unknown upsample mode \"" + text + "\" (bilinear|nearest)");
}

const std::set<std::string> kMetrics{"insdel", "road", "ehr", "sensitivity"};

void resolve(RunConfig& c) {
  c.model.seed = stage_seed(c, SeedStream::Model);
  const LayerRange range = resolve_layers(c.bottleneck, c.model.depth);
  c.bottleneck.first_layer = range.first;
  c.bottleneck.last_layer = range.last;
}

}  // namespace

std::string to_string(TargetMode mode) { return mode == TargetMode::GroundTruth ? "ground_truth" : "predicted"; }
std::string to_string(RandomizeMode mode) { return mode == RandomizeMode::Cumulative ? "cumulative" : "independent"; }
std::string to_string(UpsampleMode mode) { return mode == UpsampleMode::Bilinear ? "bilinear" : "nearest"; }

std::uint64_t stage_seed(const RunConfig& config, SeedStream stream) {
  return derive_seed(config.seed, static_cast<std::uint64_t>(stream));
}

RunConfig default_config() {
  RunConfig c;
  resolve(c);
  return c;
}

void validate_config(const RunConfig& c) {
  std::vector<std::string> problems;
  try {
    c.model.validate();
  } catch (const Error& e) {
    problems.emplace_back(e.what());
  }
  try {
    validate_spec(c.bottleneck, c.model.depth);
  } catch (const Error& e) {
    problems.emplace_back(e.what());
  }
  if (c.calibration_samples == 0) problems.emplace_back("bottleneck.calibration_samples must be >= 1");
  const TrainingConfig& t = c.training;
  if (t.samples < c.model.num_classes) problems.emplace_back("training.samples must be >= num_classes");
  if (!(t.heldout_fraction > 0.0 && t.heldout_fraction < 1.0)) {
    problems.emplace_back("training.heldout_fraction must be in (0, 1)");
  }
  if (!(t.learning_rate > 0.0)) problems.emplace_back("training.learning_rate must be > 0");
  if (t.batch_size == 0) problems.emplace_back("training.batch_size must be >= 1");
  if (t.weight_decay < 0.0) problems.emplace_back("training.weight_decay must be >= 0");
  const EvaluationConfig& e = c.evaluation;
  if (e.samples == 0) problems.emplace_back("evaluation.samples must be >= 1");
  if (!(e.step_fraction > 0.0 && e.step_fraction <= 1.0)) problems.emplace_back("evaluation.step_fraction must be in (0, 1]");
  if (e.blur_kernel == 0 || e.blur_kernel % 2 == 0) problems.emplace_back("evaluation.blur_kernel must be odd");
  if (!(e.blur_sigma > 0.0)) problems.emplace_back("evaluation.blur_sigma must be > 0");
  if (e.road_fractions.empty()) problems.emplace_back("evaluation.road_fractions must not be empty");
  for (double f : e.road_fractions) {
    if (!(f > 0.0 && f < 1.0)) {
      problems.emplace_back("evaluation.road_fractions entries must be in (0, 1)");
      break;
    }
  }
  if (e.road_sigma < 0.0) problems.emplace_back("evaluation.road_sigma must be >= 0");
  if (!(e.bin_width > 0.0 && e.bin_width <= 1.0)) problems.emplace_back("evaluation.bin_width must be in (0, 1]");
  for (const std::string& m : e.metrics) {
    if (!kMetrics.count(m)) problems.push_back("evaluation.metrics: unknown metric \"" + m + "\"");
  }
  const std::size_t pixels = c.model.image_size * c.model.image_size;
  for (std::size_t n : e.sensitivity_n) {
    if (n == 0 || n > pixels) {
      problems.emplace_back("evaluation.sensitivity_n entries must be in [1, pixels]");
      break;
    }
  }
  if (e.sensitivity_trials < 2) problems.emplace_back("evaluation.sensitivity_trials must be >= 2");
  if (c.studies.beta_values.empty()) problems.emplace_back("studies.beta_values must not be empty");
  for (double b : c.studies.beta_values) {
    if (!(b > 0.0)) {
      problems.emplace_back("studies.beta_values entries must be > 0");
      break;
    }
  }
  for (std::size_t l : c.studies.sanity_layers) {
    if (l > c.model.depth) {
      problems.emplace_back("studies.sanity_layers entries must be <= model depth");
      break;
    }
  }
  if (c.studies.samples == 0) problems.emplace_back("studies.samples must be >= 1");
  if (!problems.empty()) {
    std::string message = "invalid config: ";
    for (std::size_t i = 0; i < problems.size(); ++i) message += std::string(i ? "; " : "") + problems[i];
    fail(ErrorKind::Config, message);
  }
}

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader r;
  if (!r.keys(root, "", {"seed", "model", "bottleneck", "training", "evaluation", "studies", "paths"})) {
    fail(ErrorKind::Config, "config must be a JSON object");
  }
  r.get(root, "", "seed", c.seed);

  if (root.contains("model") && r.keys(root["model"], "model", {"image_size", "patch_size", "channels", "depth",
                                                                "embed_dim", "heads", "mlp_ratio", "num_classes"})) {
    const json& m = root["model"];
    r.get(m, "model", "image_size", c.model.image_size);
    r.get(m, "model", "patch_size", c.model.patch_size);
    r.get(m, "model", "channels", c.model.channels);
    r.get(m, "model", "depth", c.model.depth);
    r.get(m, "model", "embed_dim", c.model.embed_dim);
    r.get(m, "model", "heads", c.model.heads);
    r.get(m, "model", "mlp_ratio", c.model.mlp_ratio);
    r.get(m, "model", "num_classes", c.model.num_classes);
  }

  if (root.contains("bottleneck") &&
      r.keys(root["bottleneck"], "bottleneck",
             {"mode", "first_layer", "last_layer", "beta", "layer_betas", "layer_weights", "iterations",
              "learning_rate", "noise_batch", "stats_mode", "calibration_samples", "init_alpha",
              "include_class_token", "per_channel", "readout", "upsample"})) {
    const json& b = root["bottleneck"];
    BottleneckSpec& s = c.bottleneck;
    r.get_enum(b, "bottleneck", "mode", parse_bottleneck_mode, s.mode);
    r.get(b, "bottleneck", "first_layer", s.first_layer);
    r.get(b, "bottleneck", "last_layer", s.last_layer);
    r.get(b, "bottleneck", "beta", s.beta);
    r.get(b, "bottleneck", "layer_betas", s.layer_betas);
    r.get(b, "bottleneck", "layer_weights", s.layer_weights);
    r.get(b, "bottleneck", "iterations", s.iterations);
    r.get(b, "bottleneck", "learning_rate", s.learning_rate);
    r.get(b, "bottleneck", "noise_batch", s.noise_batch);
    r.get_enum(b, "bottleneck", "stats_mode", parse_stats_mode, s.stats_mode);
    r.get(b, "bottleneck", "calibration_samples", c.calibration_samples);
    r.get(b, "bottleneck", "init_alpha", s.init_alpha);
    r.get(b, "bottleneck", "include_class_token", s.include_class_token);
    r.get(b, "bottleneck", "per_channel", s.per_channel);
    r.get_enum(b, "bottleneck", "readout", parse_readout, s.readout);
    r.get_enum(b, "bottleneck", "upsample", parse_upsample_mode, c.upsample);
  }

  if (root.contains("training") && r.keys(root["training"], "training", {"samples", "heldout_fraction", "epochs",
                                                                         "learning_rate", "batch_size",
                                                                         "weight_decay"})) {
    const json& t = root["training"];
    r.get(t, "training", "samples", c.training.samples);
    r.get(t, "training", "heldout_fraction", c.training.heldout_fraction);
    r.get(t, "training", "epochs", c.training.epochs);
    r.get(t, "training", "learning_rate", c.training.learning_rate);
    r.get(t, "training", "batch_size", c.training.batch_size);
    r.get(t, "training", "weight_decay", c.training.weight_decay);
  }

  if (root.contains("evaluation") &&
      r.keys(root["evaluation"], "evaluation",
             {"samples", "step_fraction", "blur_kernel", "blur_sigma", "road_fractions", "road_sigma", "bin_width",
              "target", "metrics", "sensitivity_n", "sensitivity_trials", "curves"})) {
    const json& e = root["evaluation"];
    EvaluationConfig& ev = c.evaluation;
    r.get(e, "evaluation", "samples", ev.samples);
    r.get(e, "evaluation", "step_fraction", ev.step_fraction);
    r.get(e, "evaluation", "blur_kernel", ev.blur_kernel);
    r.get(e, "evaluation", "blur_sigma", ev.blur_sigma);
    r.get(e, "evaluation", "road_fractions", ev.road_fractions);
    r.get(e, "evaluation", "road_sigma", ev.road_sigma);
    r.get(e, "evaluation", "bin_width", ev.bin_width);
    r.get_enum(e, "evaluation", "target", parse_target_mode, ev.target);
    r.get(e, "evaluation", "metrics", ev.metrics);
    r.get(e, "evaluation", "sensitivity_n", ev.sensitivity_n);
    r.get(e, "evaluation", "sensitivity_trials", ev.sensitivity_trials);
    r.get(e, "evaluation", "curves", ev.curves);
  }

  if (root.contains("studies") &&
      r.keys(root["studies"], "studies", {"beta_values", "sanity_mode", "sanity_layers", "samples"})) {
    const json& s = root["studies"];
    r.get(s, "studies", "beta_values", c.studies.beta_values);
    r.get_enum(s, "studies", "sanity_mode", parse_randomize_mode, c.studies.sanity_mode);
    r.get(s, "studies", "sanity_layers", c.studies.sanity_layers);
    r.get(s, "studies", "samples", c.studies.samples);
  }

  if (root.contains("paths") && r.keys(root["paths"], "paths", {"checkpoint", "dataset", "maps"})) {
    const json& p = root["paths"];
    std::string text;
    for (auto [key, target] : {std::pair{"checkpoint", &c.paths.checkpoint}, std::pair{"dataset", &c.paths.dataset},
                               std::pair{"maps", &c.paths.maps}}) {
      text.clear();
      r.get(p, "paths", key, text);
      if (!text.empty()) *target = text;
    }
  }

  if (!r.problems().empty()) {
    std::string message = "invalid config: ";
    for (std::size_t i = 0; i < r.problems().size(); ++i) message += std::string(i ? "; " : "") + r.problems()[i];
    fail(ErrorKind::Config, message);
  }
  validate_config(c);
  resolve(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig c = parse_config(read_file(path));
  // Relative paths inside the file are taken relative to the file itself.
  const std::filesystem::path base = path.parent_path();
  for (std::filesystem::path* p : {&c.paths.checkpoint, &c.paths.dataset, &c.paths.maps}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"image_size", c.model.image_size}, {"patch_size", c.model.patch_size},
                {"channels", c.model.channels},     {"depth", c.model.depth},
                {"embed_dim", c.model.embed_dim},   {"heads", c.model.heads},
                {"mlp_ratio", c.model.mlp_ratio},   {"num_classes", c.model.num_classes}};
  const BottleneckSpec& b = c.bottleneck;
  j["bottleneck"] = {{"mode", to_string(b.mode)},
                     {"first_layer", b.first_layer},
                     {"last_layer", b.last_layer},
                     {"beta", b.beta},
                     {"layer_betas", b.layer_betas},
                     {"layer_weights", b.layer_weights},
                     {"iterations", b.iterations},
                     {"learning_rate", b.learning_rate},
                     {"noise_batch", b.noise_batch},
                     {"stats_mode", to_string(b.stats_mode)},
                     {"calibration_samples", c.calibration_samples},
                     {"init_alpha", b.init_alpha},
                     {"include_class_token", b.include_class_token},
                     {"per_channel", b.per_channel},
                     {"readout", to_string(b.readout)},
                     {"upsample", to_string(c.upsample)}};
  const TrainingConfig& t = c.training;
  j["training"] = {{"samples", t.samples},         {"heldout_fraction", t.heldout_fraction},
                   {"epochs", t.epochs},           {"learning_rate", t.learning_rate},
                   {"batch_size", t.batch_size},   {"weight_decay", t.weight_decay}};
  const EvaluationConfig& e = c.evaluation;
  j["evaluation"] = {{"samples", e.samples},
                     {"step_fraction", e.step_fraction},
                     {"blur_kernel", e.blur_kernel},
                     {"blur_sigma", e.blur_sigma},
                     {"road_fractions", e.road_fractions},
                     {"road_sigma", e.road_sigma},
                     {"bin_width", e.bin_width},
                     {"target", to_string(e.target)},
                     {"metrics", e.metrics},
                     {"sensitivity_n", e.sensitivity_n},
                     {"sensitivity_trials", e.sensitivity_trials},
                     {"curves", e.curves}};
  j["studies"] = {{"beta_values", c.studies.beta_values},
                  {"sanity_mode", to_string(c.studies.sanity_mode)},
                  {"sanity_layers", c.studies.sanity_layers},
                  {"samples", c.studies.samples}};
  j["paths"] = {{"checkpoint", c.paths.checkpoint.generic_string()},
                {"dataset", c.paths.dataset.generic_string()},
                {"maps", c.paths.maps.generic_string()}};
  return j.dump(2) + "\n";
}

std::string config_digest(const RunConfig& config) {
  // Paths are excluded so the digest names the experiment, not its location.
  RunConfig copy = config;
  copy.paths = {};
  return fnv1a_hex(run_config_to_json(copy));
}

}  // namespace coiba
