#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shortcut/model.hpp"
#include "shortcut/tensor.hpp"

namespace shortcut {

enum class Axis { Samples, Channels };
std::string to_string(Axis a);

struct DistanceMatrix {
  Axis axis = Axis::Samples;
  std::string metric = "cosine";
  Tensor values;  // [N, N]
  std::vector<std::size_t> zero_rows;  // rows that had zero norm

  std::size_t size() const { return values.rank() ? values.dim(0) : 0; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * size() + j]; }
};

struct Embedding2D {
  Axis axis = Axis::Samples;
  std::string method = "classical-mds";
  Tensor coords;  // [N, 2]
};

struct ClusterAssignment {
  Axis axis = Axis::Samples;
  std::size_t k = 1;
  std::vector<std::size_t> labels;
  std::string method = "spectral-knn";
  std::vector<double> eigenvalues;  // of the normalized affinity, descending
  std::size_t suggested_k = 1;      // eigengap heuristic
};

// Cosine distance between rows of [N, d]. A zero-norm row is at distance 1
// from every other row (0 from itself) and is listed in zero_rows.
DistanceMatrix pairwise_distances(const Tensor& vectors, Axis axis = Axis::Samples);

// Binary k-nearest-neighbor graph (ties by index), symmetrized by max,
// zero diagonal.
Tensor knn_affinity(const DistanceMatrix& d, std::size_t k_nn);

// Normalized spectral clustering (Ng-Jordan-Weiss) on the k-NN graph with
// k_nn = min(10, N - 1); k-means on the row-normalized top eigenvectors.
ClusterAssignment spectral_clustering(const DistanceMatrix& d, std::size_t k,
                                      std::uint64_t seed = 0, std::size_t k_nn = 10);

// Largest gap between consecutive eigenvalues among the first k_max.
std::size_t eigengap_suggestion(const std::vector<double>& eigenvalues, std::size_t k_max);

Embedding2D classical_mds(const DistanceMatrix& d);

// Local outlier factor with exactly k neighbors per point on rows of [N, d].
std::vector<double> local_outlier_factor(const Tensor& points, std::size_t k);

struct SprayResult {
  DistanceMatrix distances;
  ClusterAssignment clusters;
  Embedding2D embedding;
};

// Rows of `relevances` are flattened heatmaps (input space, summed over
// color channels) or pooled latent relevances of one class.
SprayResult spray(const Tensor& relevances, std::size_t k, std::uint64_t seed = 0);

// Trace ratio tr(S_b) / (tr(S_w) + 1e-9) of labeled rows.
double fisher_score(const Tensor& vectors, const std::vector<std::size_t>& labels);

struct ClusteringCandidate {
  std::string name;  // e.g. the class the clustering belongs to
  Tensor vectors;    // [N, d]
  std::vector<std::size_t> labels;
};

struct RankedClustering {
  std::string name;
  std::size_t index = 0;  // position in the input list
  double score = 0.0;
};

// Sorted by descending Fisher score; throws if a clustering has < 2 clusters.
std::vector<RankedClustering> rank_clusterings(const std::vector<ClusteringCandidate>& candidates);

struct ConceptEmbedding {
  DistanceMatrix distances;  // [C, C]
  Embedding2D embedding;
  std::vector<double> lof;  // 0 for inactive channels
  double outlier_threshold = 1.5;
  // Channels that are zero on every sample; left out of the embedding (their
  // coordinates are 0) and of the LOF neighborhoods.
  std::vector<std::size_t> inactive;

  std::vector<std::size_t> outliers() const;
};

// `latent` is [N, C] pooled activations or relevances; channels are columns.
ConceptEmbedding concept_embedding(const Tensor& latent);

// Channel representation r_i = mean of pooled activations [N, C] over channel
// i's reference rows; returns cosine distances between the r_i.
DistanceMatrix dora_distances(const Tensor& pooled,
                              const std::vector<std::vector<std::size_t>>& references);
// Same with activation-mode reference samples drawn from `inputs`.
DistanceMatrix dora_distances(const ClassifierModel& model, std::string_view layer,
                              const Tensor& inputs, std::size_t refs_per_channel);

struct Prototype {
  std::vector<double> mean;
  std::vector<double> variance;
  double weight = 0.0;
  std::vector<std::size_t> covered;       // rows assigned to this prototype
  std::vector<std::size_t> top_concepts;  // channels by descending mean
};

struct PrototypeSet {
  std::size_t class_label = 0;
  std::vector<Prototype> prototypes;  // by descending weight
  std::vector<std::size_t> assignment;
  double log_likelihood = 0.0;
};

// Diagonal Gaussian mixture fitted by EM, 10 seeded restarts, best
// log-likelihood kept. Requires N >= 5K.
PrototypeSet pcx(const Tensor& relevances, std::size_t k, std::uint64_t seed = 0,
                 std::size_t class_label = 0);

nlohmann::json to_json(const Embedding2D& e);
nlohmann::json to_json(const ClusterAssignment& c);
nlohmann::json to_json(const ConceptEmbedding& c);
nlohmann::json to_json(const PrototypeSet& p);

}  // namespace shortcut
