#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "coiba/attribution.hpp"
#include "coiba/bottleneck.hpp"
#include "coiba/data_io.hpp"
#include "coiba/errors.hpp"
#include "coiba/vit.hpp"
#include "oracles.hpp"

using namespace coiba;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 3;
  c.embed_dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  c.seed = seed;
  return c;
}

Tensor random_image(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor({c.image_size, c.image_size, c.channels}, rng, 0.0, 1.0);
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

std::vector<LayerStats> per_sample_stats(const ModelCheckpoint& model, const Tensor& image, LayerRange range) {
  const std::vector<Tensor> inputs = block_inputs(model, image);
  std::vector<LayerStats> stats;
  const std::size_t tokens = model.config().num_tokens();
  for (std::size_t l = range.first; l <= range.last; ++l) {
    const Tensor& r = inputs[l - 1];
    stats.push_back(estimate_stats(reshape(slice(r, 1, 1, tokens - 1), {tokens - 1, r.size(-1)})));
  }
  return stats;
}

}  // namespace

TEST(ModelConfig, DerivedSizes) {
  ModelConfig c;
  c.num_classes = 4;
  EXPECT_EQ(c.num_patches(), 16u);
  EXPECT_EQ(c.num_tokens(), 17u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, RejectsInconsistentSizes) {
  ModelConfig bad_patch;
  bad_patch.patch_size = 5;
  EXPECT_THROW(bad_patch.validate(), Error);
  ModelConfig bad_heads;
  bad_heads.heads = 5;
  EXPECT_THROW(bad_heads.validate(), Error);
}

TEST(ModelConfig, JsonRoundTrip) {
  const ModelConfig c = small_config(77);
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(Init, SameSeedSameModel) {
  EXPECT_TRUE(init_model(small_config(5)).bitwise_equal(init_model(small_config(5))));
  EXPECT_FALSE(init_model(small_config(5)).bitwise_equal(init_model(small_config(6))));
}

TEST(Init, EveryParameterOnceWithConsistentShape) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  std::set<std::string> names;
  for (const auto& [name, t] : m.tensors()) EXPECT_TRUE(names.insert(name).second) << name;
  EXPECT_EQ(m.at("pos_embed").shape(), (Shape{c.num_tokens(), c.embed_dim}));
  EXPECT_EQ(m.at("head.weight").shape(), (Shape{c.embed_dim, c.num_classes}));
  EXPECT_EQ(m.at(block_prefix(c.depth - 1) + "mlp.fc1.weight").shape(), (Shape{c.embed_dim, c.embed_dim * 2}));
  EXPECT_THROW(m.at("blocks.9.norm1.weight"), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelCheckpoint m = init_model(small_config());
  const auto path = std::filesystem::temp_directory_path() / "coiba_test_vit.cibt";
  save_checkpoint(m, path);
  const ModelCheckpoint loaded = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(loaded.bitwise_equal(m));
  EXPECT_EQ(loaded.config(), m.config());
  EXPECT_EQ(checkpoint_digest(loaded), checkpoint_digest(m));
}

TEST(Checkpoint, TruncatedOrCorruptBytesAreParseErrors) {
  const std::string bytes = serialize_checkpoint(init_model(small_config()));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{40}, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(bytes.substr(0, cut));
      FAIL() << "accepted truncated checkpoint of " << cut << " bytes";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Parse);
    }
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.cibt"), Error);
}

TEST(Forward, ShapesAndFiniteness) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const Tensor tokens = embed(m, random_image(c, 1));
  EXPECT_EQ(tokens.shape(), (Shape{1, c.num_tokens(), c.embed_dim}));
  const Tensor logits = forward(m, random_image(c, 1));
  EXPECT_EQ(logits.shape(), (Shape{1, c.num_classes}));
  for (double v : logits.data()) EXPECT_TRUE(std::isfinite(v));
  const std::vector<Tensor> inputs = block_inputs(m, random_image(c, 1));
  EXPECT_EQ(inputs.size(), c.depth);
  EXPECT_THROW(forward(m, Tensor::zeros({8, 8, 1})), Error);
}

TEST(Forward, ForwardFromMatchesFullForward) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const Tensor image = random_image(c, 2);
  const std::vector<Tensor> inputs = block_inputs(m, image);
  const Tensor full = forward(m, image);
  for (std::size_t first = 1; first <= c.depth; ++first) {
    EXPECT_TRUE(same_values(forward_from(m, inputs[first - 1], first), full)) << "from block " << first;
  }
}

TEST(Forward, HooksSeeEveryBlockInOrder) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  std::vector<std::size_t> seen;
  forward(m, random_image(c, 3), [&](std::size_t layer, const Tensor& r) {
    seen.push_back(layer);
    return r;
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Forward, OpenBottleneckIsTransparent) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const Tensor image = random_image(c, 4);
  const LayerRange range{1, c.depth};
  const auto stats = per_sample_stats(m, image, range);
  const DampingParams open = DampingParams::constant({c.num_patches()}, 40.0, false);
  Rng rng(9);
  BottleneckHookSet hooks(range, open, stats, 1);
  hooks.fresh_noise(rng);
  const Tensor hooked = forward(m, image, [&](std::size_t l, const Tensor& r) { return hooks(l, r); });
  EXPECT_TRUE(same_values(hooked, forward(m, image)));
  ASSERT_EQ(hooks.trace().layers.size(), c.depth);
  for (const TraceEntry& e : hooks.trace().layers) EXPECT_EQ(e.z.shape(), e.r_prime.shape());
}

TEST(Forward, ClosedBottleneckIgnoresTheImage) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const Tensor a = random_image(c, 5);
  const Tensor b = random_image(c, 6);
  const LayerRange range{1, c.depth};
  const auto shared = per_sample_stats(m, a, range);
  const DampingParams closed = DampingParams::constant({c.num_patches()}, -800.0, false);
  auto run = [&](const Tensor& image) {
    BottleneckHookSet hooks(range, closed, shared, 1);
    hooks.mean_noise();
    return forward(m, image, [&](std::size_t l, const Tensor& r) { return hooks(l, r); });
  };
  const Tensor la = run(a);
  const Tensor lb = run(b);
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_LT(std::abs(la.data()[i] - lb.data()[i]), 1e-9);
  EXPECT_FALSE(same_values(forward(m, a), forward(m, b)));
}

TEST(Forward, AlphaGradientMatchesFiniteDifferences) {
  const ModelConfig c = small_config(8);
  const ModelCheckpoint m = init_model(c);
  const Tensor image = random_image(c, 7);
  BottleneckSpec spec;
  spec.first_layer = 1;
  spec.last_layer = c.depth;
  spec.noise_batch = 3;
  spec.seed = 21;
  Rng rng(22);
  for (bool per_channel : {false, true}) {
    spec.per_channel = per_channel;
    std::vector<double> alpha(c.num_patches() * (per_channel ? c.embed_dim : 1));
    for (double& a : alpha) a = rng.uniform(-2, 2);
    const ObjectiveGradient g = objective_gradient(m, image, 1, spec, alpha);
    ASSERT_EQ(g.grad.size(), alpha.size());
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < alpha.size(); i += per_channel ? 37 : 1) {
      std::vector<double> up = alpha, down = alpha;
      up[i] += h;
      down[i] -= h;
      const double numeric =
          (objective_gradient(m, image, 1, spec, up).loss - objective_gradient(m, image, 1, spec, down).loss) / (2 * h);
      worst = std::max(worst, oracle::rel_error(g.grad[i], numeric, 1e-7));
    }
    EXPECT_LT(worst, 1e-4) << (per_channel ? "per channel" : "per token");
  }
}

TEST(Training, ZeroEpochsReturnsTheInitialModel) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const auto data = generate_dataset(12, c.num_classes, c.image_size, 1, c.patch_size);
  TrainOptions options;
  options.epochs = 0;
  EXPECT_TRUE(train_toy(m, data, data, options).model.bitwise_equal(m));
}

TEST(Training, DeterministicAndLearns) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const auto data = generate_dataset(48, c.num_classes, c.image_size, 2, c.patch_size);
  TrainOptions options;
  options.epochs = 2;
  options.batch_size = 8;
  options.seed = 4;
  const TrainResult a = train_toy(m, data, data, options);
  const TrainResult b = train_toy(m, data, data, options);
  EXPECT_TRUE(a.model.bitwise_equal(b.model));
  EXPECT_FALSE(a.model.bitwise_equal(m));
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_LT(a.log.back().loss, a.log.front().loss);
}

TEST(Training, RejectsLabelsOutsideTheHead) {
  const ModelConfig c = small_config();
  const auto data = generate_dataset(8, 5, c.image_size, 3, c.patch_size);
  TrainOptions options;
  options.epochs = 1;
  EXPECT_THROW(train_toy(init_model(c), data, data, options), Error);
}

TEST(Randomize, CumulativeFromZeroChangesEveryBlock) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const ModelCheckpoint r = randomize_parameters(m, RandomizeMode::Cumulative, 0, 1);
  EXPECT_FALSE(same_values(r.at("patch_embed.weight"), m.at("patch_embed.weight")));
  for (std::size_t b = 0; b < c.depth; ++b) {
    EXPECT_FALSE(same_values(r.at(block_prefix(b) + "attn.qkv.weight"), m.at(block_prefix(b) + "attn.qkv.weight")));
  }
}

TEST(Randomize, IndependentTouchesOneBlock) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const ModelCheckpoint r = randomize_parameters(m, RandomizeMode::Independent, 1, 1);
  const std::string inside = block_prefix(1);
  for (const auto& [name, t] : m.tensors()) {
    const bool changed = !same_values(t, r.at(name));
    if (name.rfind(inside, 0) != 0) {
      EXPECT_FALSE(changed) << name;
    } else if (name.find(".weight") != std::string::npos && name.find("norm") == std::string::npos) {
      EXPECT_TRUE(changed) << name;
    }
  }
  EXPECT_THROW(randomize_parameters(m, RandomizeMode::Independent, c.depth, 1), Error);
}

TEST(Randomize, HeadOnlyKeepsEmbeddings) {
  const ModelConfig c = small_config();
  const ModelCheckpoint m = init_model(c);
  const ModelCheckpoint r = randomize_parameters(m, RandomizeMode::Cumulative, c.depth, 1);
  EXPECT_TRUE(same_values(r.at("patch_embed.weight"), m.at("patch_embed.weight")));
  const Tensor image = random_image(c, 8);
  EXPECT_FALSE(same_values(forward(r, image), forward(m, image)));
  EXPECT_THROW(randomize_parameters(m, RandomizeMode::Cumulative, c.depth + 1, 1), Error);
}
