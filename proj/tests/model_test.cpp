#include "shortcut/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "shortcut/train.hpp"
#include "test_util.hpp"

namespace shortcut {
namespace {

using testing::central_difference;
using testing::random_tensor;
using testing::relative_error;

TEST(BuildModel, ImageCnnHasFourConvBlocksAndHead) {
  ClassifierModel m = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 0);
  std::size_t convs = 0;
  for (const Layer& l : m.layers()) convs += l.kind == LayerKind::Conv;
  EXPECT_EQ(convs, 4u);
  for (const char* name : {"conv1", "conv2", "conv3", "conv4", "fc"}) {
    EXPECT_TRUE(m.has_layer(name)) << name;
  }
  EXPECT_EQ(m.layers().back().kind, LayerKind::Linear);
  EXPECT_EQ(m.output_shape(m.layer_index("relu3")), (Shape{32, 12, 12}));
  EXPECT_EQ(m.output_shape(m.layer_index("fc")), (Shape{2}));
}

TEST(BuildModel, SameSeedIsBitIdentical) {
  auto a = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 0);
  auto b = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 0);
  auto c = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 1);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  }
  EXPECT_NE(a.parameters()[0].value, c.parameters()[0].value);
}

TEST(BuildModel, SignalCnnForwardOnZeros) {
  auto m = build_model(Architecture::SignalCnnSmall, 3, {2, 512}, 7);
  Tensor z = m.logits(Tensor({1, 2, 1, 512}));
  ASSERT_EQ(z.shape(), (Shape{1, 3}));
  for (double v : z.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(BuildModel, RejectsBadArguments) {
  EXPECT_THROW(parse_architecture("resnet50"), std::invalid_argument);
  EXPECT_THROW(build_model(Architecture::ImageCnnSmall, 1, {1, 48, 48}, 0), std::invalid_argument);
  EXPECT_THROW(build_model(Architecture::ImageCnnSmall, 2, {1, 0, 48}, 0), std::invalid_argument);
}

TEST(LayerSplit, HeadOfFeaturesEqualsForward) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 3);
  Rng rng(11);
  for (const char* layer : {"relu1", "relu3", "pool4"}) {
    LayerSplit split(m, layer);
    for (int i = 0; i < 100 / 3 + 1; ++i) {
      Tensor x = random_tensor({1, 1, 48, 48}, rng, 0.0, 1.0);
      EXPECT_LE(max_abs_diff(split.head(split.features(x)), m.logits(x)), 1e-6);
    }
  }
  EXPECT_THROW(LayerSplit(m, "conv9"), std::out_of_range);
}

// A one-channel, one-position layer read out directly by the head.
ClassifierModel identity_head_model(double w0, double w1) {
  ClassifierModel m(Architecture::Custom, {1, 1, 1}, 2, 0);
  m.add_conv("feat", 1, 1, 1, 1, {}, false).add_flatten("flatten").add_linear("fc", 1, 2, false);
  m.parameter("feat.weight").value[0] = 1.0;
  m.parameter("fc.weight").value[0] = w0;
  m.parameter("fc.weight").value[1] = w1;
  return m;
}

TEST(LatentGradient, IdentityHeadGivesOnes) {
  auto m = identity_head_model(1.0, -2.0);
  LayerSplit split(m, "feat");
  Tensor g = latent_gradient(split, Tensor({3, 1, 1, 1}, 0.5), 0);
  EXPECT_EQ(g, Tensor({3, 1, 1, 1}, 1.0));
}

TEST(LatentGradient, ConstantHeadGivesZeros) {
  auto m = identity_head_model(0.0, 0.0);
  LayerSplit split(m, "feat");
  Tensor g = latent_gradient(split, Tensor({2, 1, 1, 1}, 0.25), 1);
  EXPECT_EQ(g, Tensor({2, 1, 1, 1}, 0.0));
}

ClassifierModel tiny_net(std::uint64_t seed) {
  ClassifierModel m(Architecture::Custom, {2, 8, 8}, 3, seed);
  m.add_conv("conv1", 2, 4, 3, 3, {1, 1}).add_relu("relu1").add_max_pool("pool1", 2, 2);
  m.add_conv("conv2", 4, 6, 3, 3, {1, 1}).add_relu("relu2");
  m.add_global_max_pool("gmp").add_flatten("flatten").add_linear("fc", 6, 3);
  Rng rng(seed + 100);
  for (auto& p : m.parameters()) {
    if (p.name.ends_with(".bias")) {
      for (double& v : p.value.values()) v = rng.uniform(-0.1, 0.1);
    }
  }
  return m;
}

TEST(LatentGradient, MatchesCentralDifferences) {
  auto m = tiny_net(5);
  ASSERT_LE(m.parameter_count(), 5000u);
  // Split after pooling: relu1 outputs contain tied zeros inside pooling
  // windows, where the head is not differentiable.
  LayerSplit split(m, "pool1");
  Rng rng(6);
  Tensor x = random_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  Tensor a = split.features(x);
  for (std::size_t target = 0; target < 3; ++target) {
    Tensor g = latent_gradient(split, x, target);
    Tensor fd = central_difference(
        [&](const Tensor& t) { return split.head(t)[target]; }, a, 1e-4);
    EXPECT_LE(relative_error(g, fd), 1e-4);
  }
  EXPECT_THROW(latent_gradient(split, x, 3), std::out_of_range);
}

TEST(InputGradient, MatchesCentralDifferences) {
  auto m = tiny_net(8);
  Rng rng(9);
  Tensor x = random_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  Tensor g = input_gradient(m, x, 1);
  Tensor fd = central_difference([&](const Tensor& t) { return m.logits(t)[1]; }, x, 1e-4);
  EXPECT_LE(relative_error(g, fd), 1e-4);
}

TEST(Pooling, MaxPoolDominatesEverySpatialValue) {
  Rng rng(10);
  Tensor a = random_tensor({3, 4, 5, 5}, rng);
  Tensor p = pool_spatial(a, Pooling::Max);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 25; ++i) EXPECT_GE(p[n * 4 + c], a[(n * 4 + c) * 25 + i]);
}

TEST(Checkpoint, RoundTripStoresFloat32) {
  auto m = tiny_net(12);
  auto dir = std::filesystem::temp_directory_path() / "shortcut_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir, {{"method", "vanilla"}});
  auto loaded = load_checkpoint(dir);
  EXPECT_EQ(loaded.layer_names(), m.layer_names());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const Tensor& a = m.parameters()[i].value;
    const Tensor& b = loaded.parameters()[i].value;
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t j = 0; j < a.size(); ++j) {
      EXPECT_EQ(b[j], static_cast<double>(static_cast<float>(a[j])));
    }
  }
  EXPECT_EQ(load_checkpoint_provenance(dir).at("method"), "vanilla");
  EXPECT_EQ(std::filesystem::file_size(dir / "params" / "conv1.weight.f32"), 4u * 2 * 4 * 9);
  std::filesystem::remove_all(dir);
}

// Two classes: bright left half vs bright right half, plus noise.
TrainingSet halves(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2 * per_class;
  Tensor x({n, 1, 16, 16});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 2;
    for (std::size_t r = 0; r < 16; ++r) {
      for (std::size_t c = 0; c < 16; ++c) {
        const bool lit = (y[i] == 0) == (c < 8);
        x.at(i, 0, r, c) = (lit ? 0.7 : 0.2) + 0.1 * rng.normal();
      }
    }
  }
  return {std::move(x), std::move(y)};
}

// Independent separability oracle: logistic regression on raw pixels.
double logistic_regression_train_accuracy(const TrainingSet& d) {
  const std::size_t n = d.size(), f = d.inputs.size() / n;
  std::vector<double> w(f, 0.0);
  double b = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(f, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t j = 0; j < f; ++j) z += w[j] * d.inputs[i * f + j];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double e = p - static_cast<double>(d.labels[i]);
      for (std::size_t j = 0; j < f; ++j) gw[j] += e * d.inputs[i * f + j];
      gb += e;
    }
    for (std::size_t j = 0; j < f; ++j) w[j] -= 0.1 * gw[j] / static_cast<double>(n);
    b -= 0.1 * gb / static_cast<double>(n);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = b;
    for (std::size_t j = 0; j < f; ++j) z += w[j] * d.inputs[i * f + j];
    correct += (z > 0.0) == (d.labels[i] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TEST(Train, SeparableToyReachesPerfectAccuracy) {
  TrainingSet data = halves(40, 1);
  ASSERT_EQ(logistic_regression_train_accuracy(data), 1.0);
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 0);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 16;
  TrainResult r = train(m, data, cfg);
  EXPECT_EQ(accuracy(r.model, data), 1.0);
  ASSERT_EQ(r.loss_history.size(), 20u);
  EXPECT_LT(r.loss_history.back(), r.loss_history.front());
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  TrainingSet data = halves(4, 2);
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 0);
  TrainConfig cfg;
  cfg.epochs = 0;
  TrainResult r = train(m, data, cfg);
  EXPECT_TRUE(r.loss_history.empty());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(r.model.parameters()[i].value, m.parameters()[i].value);
  }
}

TEST(Train, DeterministicGivenSeed) {
  TrainingSet data = halves(8, 3);
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  cfg.seed = 9;
  auto a = train(m, data, cfg);
  auto b = train(m, data, cfg);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(a.model.parameters()[i].value, b.model.parameters()[i].value);
  }
  EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(Train, Errors) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 0);
  TrainConfig cfg;
  EXPECT_THROW(train(m, TrainingSet{Tensor({0, 1, 16, 16}), {}}, cfg), std::invalid_argument);
  cfg.auxiliary_weight = 1.0;
  cfg.auxiliary_loss = [](const ClassifierModel&, std::span<const ad::Var> params, const Batch&) {
    return ad::scale(ad::sum(params[0]), std::nan(""));
  };
  EXPECT_THROW(train(m, halves(2, 1), cfg), std::runtime_error);
}

}  // namespace
}  // namespace shortcut
