#include "shortcut/retrieval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "planted.hpp"
#include "shortcut/artifact.hpp"
#include "test_util.hpp"

namespace shortcut {
namespace {

using testing::random_tensor;

ConceptVector direction(std::vector<double> unit, std::string layer = "relu") {
  ConceptVector c;
  c.layer = std::move(layer);
  c.unit = unit;
  c.raw = std::move(unit);
  return c;
}

TEST(BiasScores, ProjectionExamples) {
  Tensor f({1, 3}, std::vector<double>{0.3, 0.7, -0.1});
  EXPECT_EQ(project(f, direction({0, 1, 0}))[0], 0.7);
  Tensor g({1, 3}, std::vector<double>{0.0, 0.0, 2.0});
  EXPECT_EQ(project(g, direction({1, 0, 0}))[0], 0.0);
  EXPECT_THROW(project(f, direction({1, 0})), std::invalid_argument);
}

// Property: scores are linear in the direction.
TEST(BiasScores, LinearInDirection) {
  Rng rng(21);
  Tensor f = random_tensor({30, 5}, rng);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> a(5), b(5), s(5);
    for (int j = 0; j < 5; ++j) {
      a[j] = rng.normal();
      b[j] = rng.normal();
      s[j] = a[j] + b[j];
    }
    auto pa = project(f, direction(a)), pb = project(f, direction(b)), ps = project(f, direction(s));
    for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(ps[i], pa[i] + pb[i], 1e-12);
  }
}

class PlantedData : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthConfig sc;
    sc.samples_per_class = 40;
    sc.shape = {1, 24, 24};
    spec.kind = ArtifactKind::CornerPatch;
    spec.rate = 0.5;
    data = inject(generate_synthetic(sc), spec, 3);
    set = data.training_set(Split::Train);
    for (std::size_t i : data.indices(Split::Train)) ids.push_back(data.samples[i].id);
  }
  ArtifactSpec spec;
  Dataset data;
  TrainingSet set;
  std::vector<std::string> ids;
};

TEST_F(PlantedData, NeuronCavScoresAreChannelActivations) {
  ClassifierModel model = testing::planted_detector_model(spec, 24);
  ConceptVector cav = neuron_cav("relu", 0, 4);
  BiasScoreTable t = bias_scores_activation(cav, model, ids, set.inputs);
  Tensor pooled = pool_spatial(model.activations(set.inputs, "relu"), Pooling::Max);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.scores[i], pooled[i * 4]);
  auto m = retrieval_metrics(t, data.annotations.at(spec.id));
  EXPECT_EQ(m.auc, 1.0);
  EXPECT_EQ(m.ap, 1.0);

  EXPECT_THROW(bias_scores_activation(neuron_cav("relu", 0, 5), model, ids, set.inputs),
               std::invalid_argument);
  EXPECT_THROW(bias_scores_activation(neuron_cav("nope", 0, 4), model, ids, set.inputs),
               std::invalid_argument);
}

TEST_F(PlantedData, RelevanceScoresOfOneHotCav) {
  ClassifierModel model = testing::planted_detector_model(spec, 24);
  ConceptVector cav = neuron_cav("relu", 0, 4);
  cav.space = FeatureSpace::Relevance;
  cav.target_class = 1;
  BiasScoreTable t = bias_scores_relevance(cav, model, ids, set.inputs);
  Tensor r = latent_features(model, "relu", set.inputs, FeatureSpace::Relevance, 1);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.scores[i], r[i * 4]);
  EXPECT_THROW(bias_scores_relevance(cav, model, ids, set.inputs, 7), std::out_of_range);
}

TEST(RelevanceScores, ZeroLogitGivesZero) {
  ClassifierModel m(Architecture::Custom, {2, 1, 1}, 2, 0);
  m.add_conv("c", 2, 2, 1, 1, {0, 0}, false).add_relu("r").add_global_max_pool("g").add_flatten("f");
  m.add_linear("out", 2, 2, false);
  m.parameter("out.weight").value = Tensor({2, 2}, std::vector<double>{1, 1, 0, 0});
  ConceptVector cav = neuron_cav("r", 0, 2);
  auto t = bias_scores_relevance(cav, m, {"a"}, Tensor({1, 2, 1, 1}, std::vector<double>{0.4, 0.9}), 1);
  EXPECT_EQ(t.scores[0], 0.0);
}

// The detector fires in both classes, but a hidden unit passes it to class B
// only when the class-A feature is absent. Relevance for B separates B-class
// artifact samples; activations cannot.
TEST(RelevanceScores, SeparateClassContext) {
  ClassifierModel m(Architecture::Custom, {2, 1, 1}, 2, 0);
  m.add_conv("c", 2, 2, 1, 1, {0, 0}, false).add_relu("r").add_global_max_pool("g").add_flatten("f");
  m.add_linear("h", 2, 2, false).add_relu("hr").add_linear("out", 2, 2, false);
  m.parameter("c.weight").value = Tensor({2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  // h0 = det - 4 a_A, h1 = a_A; logit_A = h1, logit_B = h0.
  m.parameter("h.weight").value = Tensor({2, 2}, std::vector<double>{1, -4, 0, 1});
  m.parameter("out.weight").value = Tensor({2, 2}, std::vector<double>{0, 1, 1, 0});

  Rng rng(22);
  std::vector<double> x;
  std::vector<int> truth;
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) {
    const bool class_b = i % 2 == 1, artifact = (i / 2) % 2 == 1;
    x.push_back(artifact ? 1.0 + 0.05 * rng.uniform() : 0.0);
    x.push_back(class_b ? 0.05 * rng.uniform() : 1.0 + 0.2 * rng.uniform());
    truth.push_back(class_b && artifact);
    ids.push_back("s" + std::to_string(i));
  }
  Tensor inputs({200, 2, 1, 1}, x);
  ConceptVector act = neuron_cav("r", 0, 2);
  ConceptVector rel = act;
  rel.space = FeatureSpace::Relevance;
  const double auc_act = auc_score(bias_scores_activation(act, m, ids, inputs).scores, truth);
  const double auc_rel = auc_score(bias_scores_relevance(rel, m, ids, inputs, 1).scores, truth);
  EXPECT_GE(auc_rel, 0.9);
  EXPECT_LT(auc_act, 0.9);
}

TEST(RetrievalMetrics, Examples) {
  auto perfect = retrieval_metrics({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  EXPECT_EQ(perfect.auc, 1.0);
  EXPECT_EQ(perfect.ap, 1.0);
  auto mixed = retrieval_metrics({0.8, 0.3, 0.5, 0.1}, {1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(mixed.auc, 0.75);
  EXPECT_DOUBLE_EQ(mixed.ap, (1.0 + 2.0 / 3.0) / 2.0);
  EXPECT_THROW(auc_score({0.1, 0.2}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(average_precision({0.1}, {0, 0}), std::invalid_argument);
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& t) {
  double win = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!t[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (t[j]) continue;
      pairs += 1;
      win += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return win / pairs;
}

// Precision at each positive's cutoff, computed from scratch (ties share
// the cutoff at the lowest tied rank).
double brute_ap(const std::vector<double>& s, const std::vector<int>& t) {
  double total = 0.0, pos = 0.0;
  for (int v : t) pos += v;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!t[i]) continue;
    double above = 0.0, hits = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= s[i]) {
        above += 1;
        hits += t[j];
      }
    }
    total += hits / above;
  }
  return total / pos;
}

TEST(RetrievalMetrics, MatchesBruteForceOracles) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> s(n);
    std::vector<int> t(n);
    const bool ties = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng.below(5)) : rng.uniform();
      t[i] = static_cast<int>(rng.below(2));
    }
    t[0] = 0;
    t[1] = 1;
    EXPECT_EQ(auc_score(s, t), pairwise_auc(s, t));
    EXPECT_NEAR(average_precision(s, t), brute_ap(s, t), 1e-12);
    if (!ties) {
      std::vector<int> flipped(n);
      for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - t[i];
      EXPECT_NEAR(auc_score(s, flipped), 1.0 - auc_score(s, t), 1e-12);
      // Strictly monotone transforms keep AP.
      std::vector<double> e(n);
      for (std::size_t i = 0; i < n; ++i) e[i] = std::exp(3.0 * s[i]) - 7.0;
      EXPECT_NEAR(average_precision(e, t), average_precision(s, t), 1e-12);
    }
  }
}

BiasScoreTable table(std::vector<std::string> ids, std::vector<double> scores) {
  BiasScoreTable t;
  t.artifact_id = "a";
  t.sample_ids = std::move(ids);
  t.scores = std::move(scores);
  return t;
}

TEST(Inspection, QueueContract) {
  auto t = table({"a", "b", "c", "d"}, {0.1, 0.9, 0.5, 0.7});
  auto all = rank_for_inspection(t, {{"a", 1}, {"b", 1}, {"c", 1}, {"d", 1}}, 10);
  EXPECT_TRUE(all.order.empty());
  EXPECT_EQ(all.page_count(), 0u);

  auto q = rank_for_inspection(t, {}, 10);
  EXPECT_EQ(q.page_count(), 1u);
  EXPECT_EQ(q.page(0), (std::vector<std::string>{"b", "d", "c", "a"}));

  auto l = rank_for_inspection(t, {{"b", 1}, {"d", 0}}, 2);
  EXPECT_EQ(l.order, (std::vector<std::string>{"d", "c", "a"}));
  EXPECT_EQ(l.page(1), (std::vector<std::string>{"a"}));
  auto strict = rank_for_inspection(t, {{"b", 1}, {"d", 0}}, 2, true);
  EXPECT_EQ(strict.order, (std::vector<std::string>{"c", "a"}));
}

TEST(Inspection, PercentileExemplars) {
  std::vector<std::string> ids;
  std::vector<double> s;
  for (int i = 0; i < 101; ++i) {
    ids.push_back("s" + std::to_string(i));
    s.push_back(i);
  }
  auto q = rank_for_inspection(table(ids, s), {}, 10);
  EXPECT_EQ(q.exemplars.at("unlabeled"), (std::vector<std::string>{"s1", "s50", "s99"}));
}

TEST_F(PlantedData, FalseNegativeOnFirstPage) {
  ClassifierModel model = testing::planted_detector_model(spec, 24);
  auto truth = data.annotations.at(spec.id);
  std::map<std::string, int> labels;
  std::string planted;
  for (const auto& id : ids) {
    if (truth.at(id) == 1 && planted.empty()) {
      planted = id;
      labels[id] = 0;
    } else if (truth.at(id) == 1) {
      labels[id] = 1;
    }
  }
  auto t = bias_scores_activation(neuron_cav("relu", 0, 4), model, ids, set.inputs);
  auto q = rank_for_inspection(t, labels, 10);
  auto first = q.page(0);
  EXPECT_NE(std::find(first.begin(), first.end(), planted), first.end());
}

TEST(Otsu, TwoGroupExample) {
  std::vector<double> v = {0, 0, 0, 1, 9, 10, 10};
  OtsuResult r = otsu_threshold(v);
  std::vector<int> above;
  for (double x : v) above.push_back(x >= r.threshold);
  EXPECT_EQ(above, (std::vector<int>{0, 0, 0, 0, 1, 1, 1}));
}

// Exhaustive search over the 256 split points with exact rational
// comparison of the between-class variance, class sums taken from the values.
std::size_t exhaustive_otsu(const std::vector<double>& v) {
  auto bins = otsu_bins(v);
  __int128 best_num = -1, best_den = 1;
  std::size_t best = 0;
  for (std::size_t t = 0; t < 256; ++t) {
    __int128 w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (std::size_t b : bins) {
      if (b <= t) {
        ++w0;
        s0 += b;
      } else {
        ++w1;
        s1 += b;
      }
    }
    if (w0 == 0 || w1 == 0) continue;
    // var_between * n^2 = w0 w1 (s0/w0 - s1/w1)^2
    const __int128 d = s0 * w1 - s1 * w0;
    const __int128 num = d * d, den = w0 * w1;
    if (best_num < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      best = t;
    }
  }
  return best;
}

TEST(Otsu, EqualsExhaustiveSearch) {
  Rng rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + rng.below(500);
    std::vector<double> v(n);
    for (auto& x : v) x = trial % 3 == 0 ? std::round(rng.uniform(-3, 10)) : rng.normal() + (rng.below(4) == 0 ? 4 : 0);
    v[0] = 1.0;
    OtsuResult r = otsu_threshold(v);
    auto bins = otsu_bins(v);
    bool two = false;
    for (std::size_t b : bins) two |= b != bins[0];
    if (!two) continue;
    EXPECT_EQ(r.bin, exhaustive_otsu(v)) << "trial " << trial;
    // mask = value >= threshold selects exactly the upper bins.
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(v[i] >= r.threshold, bins[i] > r.bin) << v[i];
  }
}

TEST(Otsu, NoPositiveValues) {
  OtsuResult r = otsu_threshold({-1.0, 0.0, -2.0});
  EXPECT_TRUE(std::isinf(r.threshold));
}

TEST(Localization, IouAndRelevanceFraction) {
  Tensor a({2, 3}, std::vector<double>{1, 1, 0, 0, 0, 0});
  Tensor b({2, 3}, std::vector<double>{0, 1, 1, 0, 0, 0});
  Tensor c({2, 3}, std::vector<double>{0, 0, 0, 1, 1, 1});
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 3.0);
  EXPECT_EQ(iou(a, b), iou(b, a));
  EXPECT_EQ(iou(a, c), 0.0);
  Tensor heat({2, 3}, std::vector<double>{2, 1, -5, 1, 0, 0});
  EXPECT_DOUBLE_EQ(relevance_fraction(heat, a), 0.75);
  EXPECT_DOUBLE_EQ(relevance_fraction(heat, a, RelevanceSign::Absolute), 3.0 / 9.0);
  EXPECT_DOUBLE_EQ(relevance_fraction(heat, a, RelevanceSign::Signed), 3.0 / -1.0);
}

TEST_F(PlantedData, LocalizePlantedPatch) {
  ClassifierModel model = testing::planted_detector_model(spec, 24);
  LayerSplit split(model, "relu");
  ConceptVector cav = neuron_cav("relu", 0, 4);
  const auto& masks = data.masks.at(spec.id);
  std::size_t checked = 0;
  for (const auto& [id, mask] : masks) {
    Tensor x = data.training_set(std::vector<std::size_t>{*data.find(id)}).inputs;
    auto r = localize(cav, split, x, mask);
    EXPECT_EQ(r.heatmap.shape(), mask.shape());
    EXPECT_GE(*r.iou, 0.4) << id;
    EXPECT_GE(*r.relevance_fraction, 0.8) << id;
    for (std::size_t i = 0; i < r.mask.size(); ++i) EXPECT_EQ(r.mask[i], r.heatmap[i] >= r.threshold ? 1.0 : 0.0);
    if (++checked == 10) break;
  }
  EXPECT_THROW(localize(neuron_cav("det", 0, 4), split, data.training_set(std::vector<std::size_t>{0}).inputs),
               std::invalid_argument);
}

TEST(ScoreExport, CsvRows) {
  auto path = std::filesystem::temp_directory_path() / "shortcut_scores.csv";
  write_scores_csv(path, table({"x", "y"}, {0.25, -1.0}), {{"x", 1}});
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "id,score,label\nx,0.25,1\ny,-1,\n");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace shortcut
