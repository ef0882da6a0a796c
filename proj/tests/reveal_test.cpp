#include "shortcut/reveal.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"

namespace shortcut {
namespace {

using testing::random_tensor;

Tensor rows(std::size_t n, std::size_t d, std::vector<double> v) { return Tensor({n, d}, std::move(v)); }

// Adjusted Rand index from the contingency table.
double adjusted_rand(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const std::size_t ka = *std::max_element(a.begin(), a.end()) + 1;
  const std::size_t kb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> table(ka * kb, 0.0), ra(ka, 0.0), rb(kb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i] * kb + b[i]] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double idx = 0, sa = 0, sb = 0;
  for (double v : table) idx += c2(v);
  for (double v : ra) sa += c2(v);
  for (double v : rb) sb += c2(v);
  const double expected = sa * sb / c2(static_cast<double>(a.size()));
  const double max_idx = (sa + sb) / 2;
  return max_idx == expected ? 1.0 : (idx - expected) / (max_idx - expected);
}

TEST(PairwiseDistances, CosineCases) {
  DistanceMatrix d = pairwise_distances(rows(4, 2, {1, 2, 1, 2, -2, 1, -1, -2}));
  EXPECT_NEAR(d(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(d(0, 2), 1.0, 1e-15);
  EXPECT_NEAR(d(0, 3), 2.0, 1e-15);
  EXPECT_TRUE(d.zero_rows.empty());
}

TEST(PairwiseDistances, ZeroRowConvention) {
  DistanceMatrix d = pairwise_distances(rows(3, 2, {0, 0, 1, 0, 0, 0}));
  EXPECT_EQ(d(0, 1), 1.0);
  EXPECT_EQ(d(0, 2), 1.0);
  EXPECT_EQ(d(0, 0), 0.0);
  EXPECT_EQ(d.zero_rows, (std::vector<std::size_t>{0, 2}));
}

// Property: symmetric, zero diagonal, within [0, 2].
TEST(PairwiseDistances, MetricShapeProperty) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(20), dim = 1 + rng.below(8);
    DistanceMatrix d = pairwise_distances(random_tensor({n, dim}, rng));
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(d(i, i), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_NEAR(d(i, j), d(j, i), 1e-9);
        EXPECT_GE(d(i, j), 0.0);
        EXPECT_LE(d(i, j), 2.0);
      }
    }
  }
}

TEST(Spray, TwoGroupsOfIdenticalHeatmaps) {
  Rng rng(2);
  Tensor a = random_tensor({1, 50}, rng), b = random_tensor({1, 50}, rng);
  std::vector<Tensor> items;
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < 30; ++i) {
    const bool first = rng.below(2) == 0;
    items.push_back(first ? a : b);
    truth.push_back(first ? 0 : 1);
  }
  ASSERT_GE(std::count(truth.begin(), truth.end(), 0), 11);
  ASSERT_GE(std::count(truth.begin(), truth.end(), 1), 11);
  SprayResult r = spray(stack(items).reshaped({30, 50}), 2);
  EXPECT_EQ(adjusted_rand(r.clusters.labels, truth), 1.0);
  EXPECT_EQ(r.clusters.suggested_k, 2u);
  EXPECT_EQ(r.embedding.coords.shape(), (Shape{30, 2}));
}

TEST(Spray, SingleClusterAndErrors) {
  Tensor same({8, 5}, 1.0);
  SprayResult r = spray(same, 1);
  EXPECT_EQ(r.clusters.labels, std::vector<std::size_t>(8, 0));
  EXPECT_THROW(spray(same, 9), std::invalid_argument);
}

Tensor blobs(Rng& rng, std::size_t per, std::size_t dim, double sep, double noise,
             std::vector<std::size_t>* truth) {
  std::vector<double> v;
  for (std::size_t g = 0; g < 3; ++g) {
    std::vector<double> center(dim, 0.1);
    center[g % dim] = sep;
    for (std::size_t i = 0; i < per; ++i) {
      for (std::size_t j = 0; j < dim; ++j) v.push_back(center[j] + noise * rng.normal());
      if (truth) truth->push_back(g);
    }
  }
  return Tensor({3 * per, dim}, std::move(v));
}

// Property: permuting the input permutes the labels (up to renaming).
TEST(SpectralClustering, PermutationEquivariant) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> truth;
    Tensor x = blobs(rng, 15, 5, 3.0, 0.2, &truth);
    const std::size_t n = x.dim(0);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    Tensor px({n, 5});
    for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data() + perm[i] * 5, 5, px.data() + i * 5);
    auto la = spectral_clustering(pairwise_distances(x), 3, 7).labels;
    auto lb = spectral_clustering(pairwise_distances(px), 3, 7).labels;
    std::vector<std::size_t> la_perm(n);
    for (std::size_t i = 0; i < n; ++i) la_perm[i] = la[perm[i]];
    EXPECT_EQ(adjusted_rand(la_perm, lb), 1.0);
    EXPECT_EQ(adjusted_rand(la, truth), 1.0);
  }
}

TEST(Fisher, SeparatedBlobsRankFirst) {
  Rng rng(4);
  std::vector<std::size_t> truth;
  Tensor sep = blobs(rng, 20, 4, 5.0, 0.3, &truth);
  Tensor one = random_tensor({60, 4}, rng);
  std::vector<std::size_t> random_split(60);
  for (auto& l : random_split) l = rng.below(3);
  std::vector<ClusteringCandidate> cands = {{"random", one, random_split}, {"blobs", sep, truth}};
  auto ranked = rank_clusterings(cands);
  EXPECT_EQ(ranked[0].name, "blobs");
  EXPECT_EQ(ranked[0].index, 1u);

  for (auto& c : cands) c.vectors *= 10.0;
  auto scaled = rank_clusterings(cands);
  EXPECT_EQ(scaled[0].name, "blobs");
  EXPECT_NEAR(scaled[0].score, ranked[0].score, 1e-9 * ranked[0].score);
}

TEST(Fisher, IdenticalClustersScoreZero) {
  Tensor x({6, 3}, 0.5);
  EXPECT_EQ(fisher_score(x, {0, 1, 0, 1, 0, 1}), 0.0);
  EXPECT_THROW(rank_clusterings({{"one", x, {0, 0, 0, 0, 0, 0}}}), std::invalid_argument);
}

TEST(Mds, EquilateralTriangle) {
  DistanceMatrix d;
  d.values = Tensor({3, 3}, std::vector<double>{0, 0.7, 0.7, 0.7, 0, 0.7, 0.7, 0.7, 0});
  Embedding2D e = classical_mds(d);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) {
      const double dx = e.coords[2 * i] - e.coords[2 * j];
      const double dy = e.coords[2 * i + 1] - e.coords[2 * j + 1];
      EXPECT_NEAR(std::hypot(dx, dy), 0.7, 1e-6);
    }
  }
}

TEST(ConceptEmbedding, DuplicatedChannelsCollapse) {
  Rng rng(5);
  Tensor a = random_tensor({20, 1}, rng, 0.0, 1.0), b = random_tensor({20, 1}, rng, 0.0, 1.0);
  Tensor latent({20, 6});
  for (std::size_t n = 0; n < 20; ++n)
    for (std::size_t c = 0; c < 6; ++c) latent[n * 6 + c] = c < 3 ? a[n] : b[n];
  ConceptEmbedding e = concept_embedding(latent);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      if ((i < 3) == (j < 3)) {
        EXPECT_EQ(e.distances(i, j), 0.0);
        EXPECT_NEAR(e.embedding.coords[2 * i], e.embedding.coords[2 * j], 1e-9);
        EXPECT_NEAR(e.embedding.coords[2 * i + 1], e.embedding.coords[2 * j + 1], 1e-9);
      }
    }
  }
}

TEST(ConceptEmbedding, ArtifactChannelIsTopOutlier) {
  Rng rng(6);
  const std::size_t n = 100, c = 16;
  Tensor latent({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double shape = rng.uniform(0.5, 1.0);
    const bool poisoned = i % 3 == 0;
    for (std::size_t k = 0; k < c; ++k) {
      latent[i * c + k] = k == 9 ? (poisoned ? 2.0 + 0.1 * rng.normal() : 0.0)
                                 : shape * (1.0 + 0.1 * static_cast<double>(k % 4)) +
                                       0.05 * rng.uniform();
    }
  }
  ConceptEmbedding e = concept_embedding(latent);
  auto top = std::max_element(e.lof.begin(), e.lof.end()) - e.lof.begin();
  EXPECT_EQ(top, 9);
  EXPECT_EQ(e.outliers().front(), 9u);
}

TEST(Lof, MatchesReferenceValues) {
  // Reference values from the standard implementation (n_neighbors = 3) on
  // points without distance ties.
  Tensor x = rows(8, 2, {0.1, 0.32, 1.2, 0.1, 0.3, 1.4, 1.1, 0.9, 0.6, 0.45, 3.2, 2.7, 0.25, 0.8, 0.9, 1.7});
  const std::vector<double> expected = {0.9025653100655715, 1.0226863129004657, 0.9384346442093158,
                                        1.0864436103584578, 0.9545257196846132, 3.0096372497375516,
                                        1.080320473216682, 1.0450074862286303};
  auto lof = local_outlier_factor(x, 3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(lof[i], expected[i], 1e-9);
}

TEST(Lof, UniformClusterAndFarOutlier) {
  Rng rng(7);
  std::vector<double> v;
  for (int i = 0; i < 200; ++i) {
    v.push_back(rng.uniform(-1, 1));
    v.push_back(rng.uniform(-1, 1));
  }
  v.push_back(10.0);
  v.push_back(10.0);
  auto lof = local_outlier_factor(Tensor({201, 2}, v), 10);
  // Interior points: away from the square's boundary.
  double sum = 0.0, worst = 0.0;
  int count = 0;
  for (int i = 0; i < 200; ++i) {
    if (std::abs(v[2 * i]) < 0.7 && std::abs(v[2 * i + 1]) < 0.7) {
      sum += lof[i];
      worst = std::max(worst, lof[i]);
      ++count;
    }
  }
  EXPECT_NEAR(sum / count, 1.0, 0.1);
  EXPECT_LT(worst, 1.5);
  EXPECT_GT(lof[200], 1.5);
}

TEST(Dora, IdenticalReferenceSetsHaveZeroDistance) {
  Rng rng(8);
  Tensor pooled = random_tensor({10, 3}, rng, 0.0, 1.0);
  DistanceMatrix d = dora_distances(pooled, {{1, 4}, {1, 4}, {7}});
  EXPECT_EQ(d(0, 1), 0.0);
  EXPECT_GT(d(0, 2), 0.0);
  DistanceMatrix two = dora_distances(random_tensor({5, 2}, rng, 0.0, 1.0), {{0}, {3}});
  EXPECT_EQ(two.size(), 2u);
  EXPECT_EQ(two(0, 1), two(1, 0));
  EXPECT_THROW(dora_distances(pooled, {{1}, {}, {2}}), std::invalid_argument);
}

TEST(Pcx, RecoversSeparatedGaussians) {
  Rng rng(9);
  const std::size_t per = 1000, dim = 4;
  const double sigma = 0.5;
  std::vector<double> mu0 = {1, 2, 0, 1}, mu1 = mu0;
  mu1[0] += 10 * sigma;
  std::vector<double> v;
  for (std::size_t i = 0; i < 2 * per; ++i) {
    const auto& mu = i < per ? mu0 : mu1;
    for (std::size_t j = 0; j < dim; ++j) v.push_back(mu[j] + sigma * rng.normal());
  }
  PrototypeSet p = pcx(Tensor({2 * per, dim}, v), 2, 3);
  ASSERT_EQ(p.prototypes.size(), 2u);
  EXPECT_NEAR(p.prototypes[0].weight + p.prototypes[1].weight, 1.0, 1e-9);
  for (const Prototype& q : p.prototypes) {
    const auto& mu = q.mean[0] > mu0[0] + 5 * sigma / 2 ? mu1 : mu0;
    for (std::size_t j = 0; j < dim; ++j) EXPECT_NEAR(q.mean[j], mu[j], 0.1 * sigma);
    EXPECT_EQ(q.covered.size(), per);
  }
}

TEST(Pcx, SingleComponentIsSampleMean) {
  Rng rng(10);
  Tensor x = random_tensor({40, 3}, rng);
  PrototypeSet p = pcx(x, 1);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 40; ++i) m += x[i * 3 + j];
    EXPECT_NEAR(p.prototypes[0].mean[j], m / 40.0, 1e-12);
  }
  EXPECT_EQ(p.prototypes[0].weight, 1.0);
  EXPECT_THROW(pcx(x, 9), std::invalid_argument);
}

// Property: every sample goes to its max-responsibility prototype and the
// weights sum to one.
TEST(Pcx, CoverageIsAPartition) {
  Rng rng(11);
  Tensor x = random_tensor({60, 5}, rng);
  PrototypeSet p = pcx(x, 3, 1);
  std::size_t covered = 0;
  double w = 0.0;
  for (std::size_t r = 0; r < p.prototypes.size(); ++r) {
    covered += p.prototypes[r].covered.size();
    w += p.prototypes[r].weight;
    for (std::size_t i : p.prototypes[r].covered) EXPECT_EQ(p.assignment[i], r);
    if (r) EXPECT_GE(p.prototypes[r - 1].weight, p.prototypes[r].weight);
  }
  EXPECT_EQ(covered, 60u);
  EXPECT_NEAR(w, 1.0, 1e-9);
}

}  // namespace
}  // namespace shortcut
