#include "shortcut/attribution.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "planted.hpp"
#include "shortcut/artifact.hpp"
#include "shortcut/io.hpp"
#include "test_util.hpp"

namespace shortcut {
namespace {

using testing::random_tensor;

TEST(Lrp, SingleLinearLayerIsZShare) {
  ClassifierModel m(Architecture::Custom, {2, 1, 1}, 2, 0);
  m.add_flatten("flatten").add_linear("fc", 2, 2, false);
  Tensor& w = m.parameter("fc.weight").value;
  w[0] = 2.0;
  w[1] = 0.0;
  Attribution a = attribute(m, Tensor({1, 2, 1, 1}, std::vector<double>{3.0, 5.0}), 0);
  EXPECT_NEAR(a.input[0], 6.0, 1e-5);
  EXPECT_EQ(a.input[1], 0.0);
}

ClassifierModel bias_free_mlp(std::uint64_t seed) {
  ClassifierModel m(Architecture::Custom, {3, 2, 2}, 3, seed);
  m.add_flatten("flatten").add_linear("fc1", 12, 10, false).add_relu("relu");
  m.add_linear("fc2", 10, 3, false);
  return m;
}

ClassifierModel bias_free_cnn(std::uint64_t seed) {
  ClassifierModel m(Architecture::Custom, {1, 8, 8}, 2, seed);
  m.add_conv("conv1", 1, 4, 3, 3, {1, 1}, false).add_relu("relu1").add_max_pool("pool1", 2, 2);
  m.add_conv("conv2", 4, 4, 3, 3, {1, 1}, false).add_relu("relu2");
  m.add_global_max_pool("gmp").add_flatten("flatten").add_linear("fc", 4, 2, false);
  return m;
}

double max_conservation_error(const ClassifierModel& m, Rng& rng, const RuleConfig& cfg) {
  Shape s = m.input_shape();
  s.insert(s.begin(), 4);
  Tensor x = random_tensor(s, rng, 0.0, 1.0);
  double worst = 0.0;
  for (std::size_t t = 0; t < m.num_classes(); ++t) {
    Attribution a = attribute(m, x, t, cfg);
    const std::size_t per = x.size() / 4;
    for (std::size_t n = 0; n < 4; ++n) {
      double total = 0.0;
      for (std::size_t j = 0; j < per; ++j) total += a.input[n * per + j];
      worst = std::max(worst, std::abs(total - a.logits[n * m.num_classes() + t]));
    }
  }
  return worst;
}

// Property: conv/pool/ReLU stacks with an epsilon-rule head conserve the
// explained logit up to the head's epsilon absorption (< epsilon).
TEST(Lrp, ConservationOnBiasFreeConvNets) {
  Rng rng(3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LE(max_conservation_error(bias_free_cnn(seed), rng, {}), 1e-6);
  }
}

// Stacked epsilon layers each absorb up to epsilon times the summed weights
// feeding them, so the tight check uses a vanishing epsilon.
TEST(Lrp, ConservationOnBiasFreeMlp) {
  Rng rng(4);
  RuleConfig tiny;
  tiny.epsilon = 1e-12;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LE(max_conservation_error(bias_free_mlp(seed), rng, tiny), 1e-9);
    EXPECT_LE(max_conservation_error(bias_free_mlp(seed), rng, {}), 1e-4);
  }
}

TEST(Lrp, ZPlusDropsAllNegativeConv) {
  ClassifierModel m(Architecture::Custom, {1, 4, 4}, 2, 0);
  m.add_conv("conv0", 1, 2, 3, 3, {1, 1}).add_relu("relu0");
  m.add_conv("conv1", 2, 2, 3, 3, {1, 1}, false).add_relu("relu1");
  m.add_global_max_pool("gmp").add_flatten("flatten").add_linear("fc", 2, 2);
  for (double& v : m.parameter("conv1.weight").value.values()) v = -0.5;
  Rng rng(1);
  Attribution a = attribute(m, random_tensor({2, 1, 4, 4}, rng, 0.1, 1.0), 1);
  for (double v : a.at("relu0").values()) EXPECT_EQ(v, 0.0);
  for (double v : a.input.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lrp, RetainsEveryLayer) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 0);
  Rng rng(2);
  Attribution a = attribute(m, random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0), 0);
  for (const std::string& name : m.layer_names()) {
    Shape s = m.output_shape(m.layer_index(name));
    s.insert(s.begin(), 2);
    EXPECT_EQ(a.at(name).shape(), s) << name;
  }
  EXPECT_EQ(a.input.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_THROW(attribute(m, Tensor({1, 1, 16, 16}), 2), std::out_of_range);
  EXPECT_THROW(parse_attribution_rule("gradcam"), std::invalid_argument);
}

TEST(Lrp, StopLayerSkipsLowerLayers) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 0);
  Rng rng(2);
  Tensor x = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
  RuleConfig cfg;
  cfg.stop_layer = "relu3";
  Attribution part = attribute(m, x, 1, cfg);
  Attribution full = attribute(m, x, 1);
  EXPECT_EQ(part.at("relu3"), full.at("relu3"));
  EXPECT_EQ(part.input.size(), 0u);
  EXPECT_FALSE(part.layers.count("conv3"));
}

TEST(GradientRule, MatchesInputGradient) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 4);
  Rng rng(5);
  Tensor x = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
  RuleConfig cfg;
  cfg.rule = AttributionRule::Gradient;
  Attribution a = attribute(m, x, 1, cfg);
  EXPECT_LE(max_abs_diff(a.input, input_gradient(m, x, 1)), 1e-12);
}

class ConceptHeatmapTest : public ::testing::Test {
 protected:
  ClassifierModel model = build_model(Architecture::ImageCnnSmall, 2, {1, 16, 16}, 6);
  LayerSplit split{model, "relu3"};
  Tensor x;
  void SetUp() override {
    Rng rng(7);
    x = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
  }
};

TEST_F(ConceptHeatmapTest, OneHotEqualsChannelRestrictedInit) {
  const std::size_t c = split.channels();
  std::vector<double> h(c, 0.0);
  h[3] = 1.0;
  Attribution via_cav = concept_heatmap(split, x, h);
  Tensor init = split.features(x);
  const std::size_t inner = init.size() / (2 * c);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < c; ++k)
      if (k != 3)
        for (std::size_t j = 0; j < inner; ++j) init[(n * c + k) * inner + j] = 0.0;
  EXPECT_EQ(via_cav.at("relu3"), init);
  Attribution direct = propagate_from(model, x, "relu3", init);
  EXPECT_EQ(via_cav.input, direct.input);
}

TEST_F(ConceptHeatmapTest, ZeroCavGivesZeroHeatmap) {
  Attribution a = concept_heatmap(split, x, std::vector<double>(split.channels(), 0.0));
  for (double v : a.input.values()) EXPECT_EQ(v, 0.0);
}

// Property: the backward pass is linear in the initial relevance.
TEST_F(ConceptHeatmapTest, LinearInCav) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> h1(split.channels()), h2(split.channels()), h12(split.channels());
    for (std::size_t i = 0; i < h1.size(); ++i) {
      h1[i] = rng.uniform(-1, 1);
      h2[i] = rng.uniform(-1, 1);
      h12[i] = h1[i] + h2[i];
    }
    Tensor sum = concept_heatmap(split, x, h1).input + concept_heatmap(split, x, h2).input;
    Tensor joint = concept_heatmap(split, x, h12).input;
    double scale = 0.0;
    for (double v : joint.values()) scale = std::max(scale, std::abs(v));
    EXPECT_LE(max_abs_diff(sum, joint), 1e-10 * std::max(scale, 1.0));
  }
}

TEST_F(ConceptHeatmapTest, DimensionMismatchThrows) {
  EXPECT_THROW(concept_heatmap(split, x, {1.0, 2.0}), std::invalid_argument);
}

TEST(ChannelSummed, AddsColorChannels) {
  Tensor h({1, 3, 1, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(channel_summed(h), Tensor({1, 1, 2}, std::vector<double>{9, 12}));
}

Dataset poisoned_images(std::size_t per_class, double rate) {
  SynthConfig c;
  c.samples_per_class = per_class;
  ArtifactSpec spec;
  spec.rate = rate;
  return inject(generate_synthetic(c), spec, 1);
}

TEST(ReferenceSamples, FullKIsPermutation) {
  auto m = build_model(Architecture::ImageCnnSmall, 2, {1, 48, 48}, 0);
  Dataset d = poisoned_images(30, 0.3);
  TrainingSet t = d.training_set(Split::Val);
  for (ReferenceMode mode : {ReferenceMode::Activation, ReferenceMode::Relevance}) {
    auto ids = reference_samples(m, "relu3", 1, t.inputs, mode, t.size());
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(ids[i], i);
  }
  EXPECT_THROW(reference_samples(m, "relu3", 32, t.inputs, ReferenceMode::Activation, 1),
               std::out_of_range);
}

TEST(ReferenceSamples, DeadChannelFallsBackToRowOrder) {
  ArtifactSpec spec;
  auto m = testing::planted_detector_model(spec, 48);
  m.parameter("det.bias").value[1] = -1e6;  // channel 1 never fires
  Dataset d = poisoned_images(30, 0.3);
  TrainingSet t = d.training_set(Split::Train);
  auto ids = reference_samples(m, "relu", 1, t.inputs, ReferenceMode::Activation, 10);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ids[i], i);
}

TEST(ReferenceSamples, PlantedDetectorFindsPoisonedSamples) {
  ArtifactSpec spec;
  auto m = testing::planted_detector_model(spec, 48);
  Dataset d = poisoned_images(60, 0.3);
  auto rows = d.indices(Split::Train);
  TrainingSet t = d.training_set(rows);
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (d.annotations.at(spec.id).at(d.samples[rows[i]].id) == 1) truth.push_back(i);
  }
  ASSERT_FALSE(truth.empty());
  for (ReferenceMode mode : {ReferenceMode::Activation, ReferenceMode::Relevance}) {
    auto top = reference_samples(m, "relu", 0, t.inputs, mode, truth.size());
    std::sort(top.begin(), top.end());
    EXPECT_EQ(top, truth) << to_string(mode);
  }
}

TEST(HeatmapExport, PngAndCsv) {
  auto dir = std::filesystem::temp_directory_path() / "shortcut_heatmap";
  std::filesystem::create_directories(dir);
  Tensor h({3, 4}, std::vector<double>{-1, 0, 1, 0.5, 0, 0, 0, 0, 2, -2, 0, 1});
  write_heatmap_png(dir / "h.png", h);
  write_heatmap_csv(dir / "h.csv", h);
  Tensor png = io::read_png(dir / "h.png");
  EXPECT_EQ(png.shape(), (Shape{3, 3, 4}));
  EXPECT_EQ(png[(0 * 3 + 2) * 4 + 0], 1.0);  // +max is pure red
  EXPECT_EQ(png[(2 * 3 + 2) * 4 + 0], 0.0);
  EXPECT_EQ(io::read_csv(dir / "h.csv"), h);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace shortcut
