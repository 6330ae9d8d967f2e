#include "coiba/vit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "coiba/adam.hpp"
#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

constexpr char kMagic[4] = {'C', 'I', 'B', 'T'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-6;

enum class InitRule { Weight, Zero, One };

InitRule rule_for(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  const bool is_norm = name.find("norm") != std::string::npos;
  if (ends_with(".bias")) return InitRule::Zero;
  if (is_norm && ends_with(".weight")) return InitRule::One;
  return InitRule::Weight;
}

Tensor draw(const Shape& shape, InitRule rule, Rng& rng) {
  std::vector<double> values(element_count(shape));
  switch (rule) {
    case InitRule::Zero: break;
    case InitRule::One: std::fill(values.begin(), values.end(), 1.0); break;
    case InitRule::Weight:
      for (double& v : values) v = rng.truncated_normal(kInitStd);
      break;
  }
  return Tensor::from_data(shape, std::move(values));
}

// Names and shapes in canonical order.
std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t hidden = d * c.mlp_ratio;
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch_embed.weight", {c.patch_dim(), d}},
      {"patch_embed.bias", {d}},
      {"cls_token", {1, 1, d}},
      {"pos_embed", {c.num_tokens(), d}},
  };
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string p = block_prefix(b);
    out.push_back({p + "norm1.weight", {d}});
    out.push_back({p + "norm1.bias", {d}});
    out.push_back({p + "attn.qkv.weight", {d, 3 * d}});
    out.push_back({p + "attn.qkv.bias", {3 * d}});
    out.push_back({p + "attn.proj.weight", {d, d}});
    out.push_back({p + "attn.proj.bias", {d}});
    out.push_back({p + "norm2.weight", {d}});
    out.push_back({p + "norm2.bias", {d}});
    out.push_back({p + "mlp.fc1.weight", {d, hidden}});
    out.push_back({p + "mlp.fc1.bias", {hidden}});
    out.push_back({p + "mlp.fc2.weight", {hidden, d}});
    out.push_back({p + "mlp.fc2.bias", {d}});
  }
  out.push_back({"norm.weight", {d}});
  out.push_back({"norm.bias", {d}});
  out.push_back({"head.weight", {d, c.num_classes}});
  out.push_back({"head.bias", {c.num_classes}});
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return matmul(x, weight) + bias;
}

// [B, H, W, C] -> [B, P, patch*patch*C]
Tensor patchify(const ModelConfig& c, const Tensor& images) {
  const Shape& s = images.shape();
  const std::size_t batch = s[0];
  const std::size_t ps = c.patch_size;
  const std::size_t grid = c.grid();
  const std::size_t ch = c.channels;
  const auto src = images.data();
  std::vector<double> out(batch * c.num_patches() * c.patch_dim());
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        for (std::size_t py = 0; py < ps; ++py) {
          const std::size_t y = gy * ps + py;
          const std::size_t row = ((b * c.image_size + y) * c.image_size + gx * ps) * ch;
          std::copy_n(src.data() + row, ps * ch, out.data() + o);
          o += ps * ch;
        }
      }
    }
  }
  return Tensor::from_data({batch, c.num_patches(), c.patch_dim()}, std::move(out));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t read_le(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  std::string read_bytes(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::Parse, "checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    problems.push_back("image_size must be a positive multiple of patch_size");
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    problems.push_back("embed_dim must be a positive multiple of heads");
  }
  if (depth == 0) problems.push_back("depth must be >= 1");
  if (channels == 0) problems.push_back("channels must be >= 1");
  if (mlp_ratio == 0) problems.push_back("mlp_ratio must be >= 1");
  if (num_classes < 2) problems.push_back("num_classes must be >= 2");
  if (!problems.empty()) {
    std::string message = "invalid model config: ";
    for (std::size_t i = 0; i < problems.size(); ++i) message += std::string(i ? "; " : "") + problems[i];
    fail(ErrorKind::Config, message);
  }
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j = {
      {"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
      {"depth", c.depth},           {"embed_dim", c.embed_dim},   {"heads", c.heads},
      {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"seed", c.seed},
  };
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("model config JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// ModelCheckpoint

void ModelCheckpoint::add(const std::string& name, Tensor tensor) {
  if (index_.count(name)) fail(ErrorKind::Contract, "duplicate tensor name '" + name + "'");
  index_[name] = tensors_.size();
  tensors_.emplace_back(name, std::move(tensor));
}

const Tensor& ModelCheckpoint::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::Contract, "checkpoint has no tensor '" + name + "'");
  return tensors_[it->second].second;
}

Tensor& ModelCheckpoint::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::Contract, "checkpoint has no tensor '" + name + "'");
  return tensors_[it->second].second;
}

ModelCheckpoint ModelCheckpoint::clone(bool requires_grad) const {
  ModelCheckpoint out(config_);
  for (const auto& [name, t] : tensors_) {
    Tensor copy = t.detach();
    copy.set_requires_grad(requires_grad);
    out.add(name, std::move(copy));
  }
  return out;
}

bool ModelCheckpoint::bitwise_equal(const ModelCheckpoint& other) const {
  if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& [na, ta] = tensors_[i];
    const auto& [nb, tb] = other.tensors_[i];
    if (na != nb || ta.shape() != tb.shape()) return false;
    if (std::memcmp(ta.data().data(), tb.data().data(), ta.numel() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

std::string block_prefix(std::size_t block) { return "blocks." + std::to_string(block) + "."; }

ModelCheckpoint init_model(const ModelConfig& config) {
  config.validate();
  ModelCheckpoint model(config);
  Rng rng(config.seed);
  for (const auto& [name, shape] : layout(config)) {
    model.add(name, draw(shape, rule_for(name), rng));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) fail(ErrorKind::Dimension, "stack_images: no images");
  const Shape& first = images.front().shape();
  std::vector<double> values;
  values.reserve(images.size() * images.front().numel());
  for (const Tensor& img : images) {
    if (img.shape() != first) fail(ErrorKind::Dimension, "stack_images: shapes differ");
    values.insert(values.end(), img.data().begin(), img.data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor::from_data(std::move(shape), std::move(values));
}

Tensor embed(const ModelCheckpoint& model, const Tensor& images) {
  const ModelConfig& c = model.config();
  Tensor batch = images;
  if (images.rank() == 3) batch = reshape(images, {1, images.shape()[0], images.shape()[1], images.shape()[2]});
  const Shape& s = batch.shape();
  if (batch.rank() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.channels) {
    fail(ErrorKind::Dimension, "image shape " + shape_string(images.shape()) + " does not match model input [" +
                                   std::to_string(c.image_size) + "x" + std::to_string(c.image_size) + "x" +
                                   std::to_string(c.channels) + "]");
  }
  const std::size_t b = s[0];
  const Tensor patches = linear(patchify(c, batch), model.at("patch_embed.weight"), model.at("patch_embed.bias"));
  const Tensor cls = expand(model.at("cls_token"), {b, 1, c.embed_dim});
  return concat({cls, patches}, 1) + model.at("pos_embed");
}

Tensor run_block(const ModelCheckpoint& model, std::size_t layer, const Tensor& tokens) {
  const ModelConfig& c = model.config();
  if (layer < 1 || layer > c.depth) fail(ErrorKind::Index, "block " + std::to_string(layer) + " out of range");
  const std::string p = block_prefix(layer - 1);
  const std::size_t b = tokens.size(0);
  const std::size_t t = tokens.size(1);
  const std::size_t d = c.embed_dim;
  const std::size_t h = c.heads;
  const std::size_t dh = d / h;

  const Tensor normed = layer_norm(tokens, model.at(p + "norm1.weight"), model.at(p + "norm1.bias"), kNormEps);
  const Tensor qkv = linear(normed, model.at(p + "attn.qkv.weight"), model.at(p + "attn.qkv.bias"));
  auto heads = [&](std::size_t offset) {
    return permute(reshape(slice(qkv, -1, offset, d), {b, t, h, dh}), {0, 2, 1, 3});
  };
  const Tensor q = heads(0);
  const Tensor k = heads(d);
  const Tensor v = heads(2 * d);
  const Tensor attn = softmax(scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
  const Tensor mixed = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, t, d});
  const Tensor x = tokens + linear(mixed, model.at(p + "attn.proj.weight"), model.at(p + "attn.proj.bias"));

  const Tensor normed2 = layer_norm(x, model.at(p + "norm2.weight"), model.at(p + "norm2.bias"), kNormEps);
  const Tensor hidden = gelu(linear(normed2, model.at(p + "mlp.fc1.weight"), model.at(p + "mlp.fc1.bias")));
  return x + linear(hidden, model.at(p + "mlp.fc2.weight"), model.at(p + "mlp.fc2.bias"));
}

Tensor classify(const ModelCheckpoint& model, const Tensor& tokens) {
  const std::size_t b = tokens.size(0);
  const std::size_t d = model.config().embed_dim;
  const Tensor cls = reshape(slice(tokens, 1, 0, 1), {b, d});
  const Tensor normed = layer_norm(cls, model.at("norm.weight"), model.at("norm.bias"), kNormEps);
  return linear(normed, model.at("head.weight"), model.at("head.bias"));
}

Tensor forward(const ModelCheckpoint& model, const Tensor& images, const BlockHook& hook) {
  return forward_from(model, embed(model, images), 1, hook);
}

Tensor forward_from(const ModelCheckpoint& model, const Tensor& tokens, std::size_t first_layer,
                    const BlockHook& hook) {
  const std::size_t depth = model.config().depth;
  if (first_layer < 1 || first_layer > depth) {
    fail(ErrorKind::Index, "first layer " + std::to_string(first_layer) + " out of range");
  }
  Tensor x = tokens;
  for (std::size_t layer = first_layer; layer <= depth; ++layer) {
    if (hook) x = hook(layer, x);
    x = run_block(model, layer, x);
  }
  return classify(model, x);
}

std::vector<std::vector<double>> predict_proba(const ModelCheckpoint& model, const Tensor& images) {
  const Tensor probs = softmax(forward(model, images).detach(), -1);
  const std::size_t rows = probs.size(0);
  const std::size_t classes = probs.size(1);
  std::vector<std::vector<double>> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r].assign(probs.data().begin() + r * classes, probs.data().begin() + (r + 1) * classes);
  }
  return out;
}

std::vector<Tensor> block_inputs(const ModelCheckpoint& model, const Tensor& image) {
  std::vector<Tensor> out;
  forward(model, image, [&](std::size_t, const Tensor& x) {
    out.push_back(x);
    return x;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Training

double accuracy(const ModelCheckpoint& model, std::span<const SyntheticSample> samples) {
  if (samples.empty()) return 0.0;
  constexpr std::size_t kChunk = 64;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<Tensor> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(samples[i].image);
    const Tensor logits = forward(model, stack_images(images));
    const std::size_t classes = logits.size(1);
    const auto v = logits.data();
    for (std::size_t i = start; i < end; ++i) {
      const auto row = v.subspan((i - start) * classes, classes);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == samples[i].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train_toy(const ModelCheckpoint& model, std::span<const SyntheticSample> train,
                      std::span<const SyntheticSample> heldout, const TrainOptions& options) {
  TrainResult result;
  if (options.epochs == 0) {
    result.model = model.clone();
    result.heldout_accuracy = accuracy(result.model, heldout);
    return result;
  }
  if (train.empty()) fail(ErrorKind::Training, "training set is empty");
  if (options.batch_size == 0) fail(ErrorKind::Config, "batch_size must be >= 1");
  for (const SyntheticSample& s : train) {
    if (s.label >= model.config().num_classes) fail(ErrorKind::Index, "sample label exceeds num_classes");
  }

  ModelCheckpoint trainable = model.clone(true);
  std::vector<AdamState> states(trainable.tensors().size());
  for (AdamState& st : states) st.weight_decay = options.weight_decay;

  const std::size_t steps_per_epoch = (train.size() + options.batch_size - 1) / options.batch_size;
  const std::size_t total_steps = steps_per_epoch * options.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(options.seed, epoch));
    rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(train[order[i]].image);
        labels.push_back(train[order[i]].label);
      }
      const Tensor logits = forward(trainable, stack_images(images));
      const Tensor loss = cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) {
        fail(ErrorKind::Training, "loss diverged (non-finite) in epoch " + std::to_string(epoch));
      }
      loss.backward();
      // Cosine decay over the whole run.
      const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
      const double lr = options.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      const auto& tensors = trainable.tensors();
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        Tensor param = tensors[i].second;  // shares storage
        states[i].learning_rate = lr;
        try {
          adam_step(states[i], param.mutable_data(), param.grad());
        } catch (const Error& e) {
          fail(ErrorKind::Training, "epoch " + std::to_string(epoch) + ": " + e.what());
        }
        param.zero_grad();
      }
      ++step;
      loss_total += loss.item() * static_cast<double>(end - start);
      const std::size_t classes = logits.size(1);
      for (std::size_t r = 0; r < labels.size(); ++r) {
        const auto row = logits.data().subspan(r * classes, classes);
        if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[r]) ++correct;
      }
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_total / static_cast<double>(train.size());
    entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    entry.heldout_accuracy = accuracy(trainable.clone(), heldout);
    result.log.push_back(entry);
  }
  result.model = trainable.clone();
  result.heldout_accuracy = result.log.back().heldout_accuracy;
  return result;
}

// ---------------------------------------------------------------------------
// Randomization

ModelCheckpoint randomize_parameters(const ModelCheckpoint& model, RandomizeMode mode,
                                     std::size_t layer_index, std::uint64_t seed) {
  const std::size_t depth = model.config().depth;
  const std::size_t limit = mode == RandomizeMode::Cumulative ? depth : depth - 1;
  if (layer_index > limit) {
    fail(ErrorKind::Index, "randomization layer " + std::to_string(layer_index) + " out of range [0, " +
                               std::to_string(limit) + "]");
  }
  auto affected = [&](const std::string& name) {
    if (name.rfind("blocks.", 0) == 0) {
      const std::size_t block = std::stoul(name.substr(7, name.find('.', 7) - 7));
      return mode == RandomizeMode::Independent ? block == layer_index : block >= layer_index;
    }
    if (mode == RandomizeMode::Independent) return false;
    if (name.rfind("norm.", 0) == 0 || name.rfind("head.", 0) == 0) return true;
    return layer_index == 0;  // embeddings
  };
  ModelCheckpoint out(model.config());
  Rng rng(derive_seed(seed ^ 0x5A4E1D0BULL, layer_index * 2 + (mode == RandomizeMode::Cumulative ? 1 : 0)));
  for (const auto& [name, t] : model.tensors()) {
    out.add(name, affected(name) ? draw(t.shape(), rule_for(name), rng) : t.detach());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file

std::string serialize_checkpoint(const ModelCheckpoint& model) {
  std::string out(kMagic, 4);
  put_u32(out, kFormatVersion);
  const std::string header = config_to_json(model.config());
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<std::uint32_t>(model.tensors().size()));
  for (const auto& [name, t] : model.tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put_u64(out, dim);
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ModelCheckpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.read_bytes(4) != std::string(kMagic, 4)) fail(ErrorKind::Parse, "bad checkpoint magic at byte 0");
  const auto version = in.read_le(4);
  if (version != kFormatVersion) {
    fail(ErrorKind::Parse, "unsupported checkpoint version " + std::to_string(version) + " at byte 4");
  }
  const auto header_len = in.read_le(4);
  const ModelConfig config = config_from_json(in.read_bytes(header_len));
  const auto expected = layout(config);
  const auto count = in.read_le(4);
  if (count != expected.size()) {
    fail(ErrorKind::Parse, "checkpoint holds " + std::to_string(count) + " tensors, config needs " +
                               std::to_string(expected.size()));
  }
  std::map<std::string, Shape> want(expected.begin(), expected.end());
  ModelCheckpoint model(config);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = in.offset();
    const std::string name = in.read_bytes(in.read_le(4));
    const auto rank = in.read_le(4);
    if (rank > 8) fail(ErrorKind::Parse, "tensor rank " + std::to_string(rank) + " at byte " + std::to_string(at));
    Shape shape(rank);
    for (auto& dim : shape) dim = in.read_le(8);
    auto it = want.find(name);
    if (it == want.end()) fail(ErrorKind::Parse, "unexpected tensor '" + name + "' at byte " + std::to_string(at));
    if (it->second != shape) {
      fail(ErrorKind::Parse, "tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                                 shape_string(it->second));
    }
    if (model.contains(name)) fail(ErrorKind::Parse, "duplicate tensor '" + name + "'");
    std::vector<double> values(element_count(shape));
    for (double& v : values) v = std::bit_cast<double>(in.read_le(8));
    model.add(name, Tensor::from_data(shape, std::move(values)));
  }
  if (!in.at_end()) fail(ErrorKind::Parse, "trailing bytes after checkpoint at byte " + std::to_string(in.offset()));
  return model;
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

std::string checkpoint_digest(const ModelCheckpoint& model) {
  return fnv1a_hex(serialize_checkpoint(model));
}

}  // namespace coiba
