#pragma once

// Minimal pre-norm Vision Transformer with a hook at the input of every
// block, a deterministic initializer, a small trainer and a binary
// checkpoint format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coiba/tensor.hpp"

namespace coiba {

struct SyntheticSample;

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t depth = 6;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 8;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  bool operator==(const ModelConfig&) const = default;
};

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

class ModelCheckpoint {
 public:
  ModelCheckpoint() = default;
  explicit ModelCheckpoint(ModelConfig config) : config_(config) {}

  const ModelConfig& config() const { return config_; }

  void add(const std::string& name, Tensor tensor);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  // Insertion order; stable across save/load.
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  // Deep copy with every tensor a fresh leaf.
  ModelCheckpoint clone(bool requires_grad = false) const;

  bool bitwise_equal(const ModelCheckpoint& other) const;

 private:
  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::size_t> index_;
};

std::string block_prefix(std::size_t block);

// Truncated-normal(0.02) weights, zero biases, unit norm scales.
ModelCheckpoint init_model(const ModelConfig& config);

// Called with (1-based block index, residual stream entering that block's
// first norm); the returned tensor replaces the residual.
using BlockHook = std::function<Tensor(std::size_t layer, const Tensor& residual)>;

// images: [H, W, C] or [B, H, W, C] -> tokens [B, T, d] (class token first,
// positional embedding added).
Tensor embed(const ModelCheckpoint& model, const Tensor& images);
Tensor run_block(const ModelCheckpoint& model, std::size_t layer, const Tensor& tokens);
// Final norm + linear head on the class token: [B, T, d] -> [B, C].
Tensor classify(const ModelCheckpoint& model, const Tensor& tokens);
// Logits [B, C]; B is 1 for a single image unless a hook widens the batch.
Tensor forward(const ModelCheckpoint& model, const Tensor& images, const BlockHook& hook = {});

// Runs blocks first_layer..depth on `tokens` and classifies; the hook sees
// those blocks only.
Tensor forward_from(const ModelCheckpoint& model, const Tensor& tokens, std::size_t first_layer,
                    const BlockHook& hook = {});

// Softmax probabilities per row of forward(); no graph is recorded.
std::vector<std::vector<double>> predict_proba(const ModelCheckpoint& model, const Tensor& images);

// Residual stream entering each block (index 0 = block 1), batch 1.
std::vector<Tensor> block_inputs(const ModelCheckpoint& model, const Tensor& image);

Tensor stack_images(std::span<const Tensor> images);

struct TrainOptions {
  std::size_t epochs = 12;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

struct TrainResult {
  ModelCheckpoint model;
  std::vector<EpochLog> log;
  double heldout_accuracy = 0.0;
};

TrainResult train_toy(const ModelCheckpoint& model, std::span<const SyntheticSample> train,
                      std::span<const SyntheticSample> heldout, const TrainOptions& options);

double accuracy(const ModelCheckpoint& model, std::span<const SyntheticSample> samples);

enum class RandomizeMode { Independent, Cumulative };

// Independent: redraw block `layer_index` (0-based) only. Cumulative: redraw
// blocks >= layer_index plus final norm and head; at 0 the patch/class/position
// embeddings are redrawn as well; layer_index == depth redraws the head only.
ModelCheckpoint randomize_parameters(const ModelCheckpoint& model, RandomizeMode mode,
                                     std::size_t layer_index, std::uint64_t seed);

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelCheckpoint& model);
ModelCheckpoint deserialize_checkpoint(const std::string& bytes);

// FNV-1a 64 of the serialized checkpoint, hex.
std::string checkpoint_digest(const ModelCheckpoint& model);

}  // namespace coiba
