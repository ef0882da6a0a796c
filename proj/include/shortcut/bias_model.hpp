#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shortcut/dataset.hpp"
#include "shortcut/model.hpp"
#include "shortcut/tensor.hpp"

namespace shortcut {

enum class CavMethod { Svm, Pattern, Neuron };
std::string to_string(CavMethod m);
CavMethod parse_cav_method(std::string_view id);

// Which latent quantity a CAV lives on.
enum class FeatureSpace { Activation, Relevance };
std::string to_string(FeatureSpace s);
FeatureSpace parse_feature_space(std::string_view id);

struct ConceptVector {
  std::string artifact_id;
  std::string layer;
  CavMethod method = CavMethod::Pattern;
  FeatureSpace space = FeatureSpace::Activation;
  std::optional<std::size_t> target_class;  // relevance CAVs only
  Pooling pooling = Pooling::Max;
  std::vector<double> raw;
  std::vector<double> unit;  // raw / ||raw||, all zeros when degenerate
  double bias = 0.0;         // SVM offset, in raw units
  std::size_t iteration = 0;
  std::string fingerprint;   // of the labeled training set
  bool degenerate = false;
  nlohmann::json diagnostics = nlohmann::json::object();

  std::size_t channels() const { return unit.size(); }
};

struct SvmOptions {
  double lambda = 0.01;
  std::size_t iterations = 5000;
};

// Rows of pos / neg are pooled activations [N, C].
ConceptVector fit_svm_cav(const Tensor& pos, const Tensor& neg, const SvmOptions& options = {});
ConceptVector fit_pattern_cav(const Tensor& features, const std::vector<int>& labels);
ConceptVector neuron_cav(std::string layer, std::size_t channel, std::size_t channels);

// Generic entry: labels 1 / 0 on rows of features.
ConceptVector fit_cav(CavMethod method, const Tensor& features, const std::vector<int>& labels,
                      const SvmOptions& options = {});

// 64-bit FNV-1a over (id, label) pairs in id order, as 16 hex digits.
std::string label_fingerprint(const std::map<std::string, int>& labels);

// Max-pooled latent features [N, C] at `layer`. Relevance space explains
// `target_class` with the LRP composite.
Tensor latent_features(const ClassifierModel& model, std::string_view layer, const Tensor& inputs,
                       FeatureSpace space = FeatureSpace::Activation,
                       std::optional<std::size_t> target_class = std::nullopt);

nlohmann::json to_json(const ConceptVector& c);
ConceptVector cav_from_json(const nlohmann::json& j);
void save_cav(const ConceptVector& c, const std::filesystem::path& path);
ConceptVector load_cav(const std::filesystem::path& path);

// Directory of CAV iterations: <root>/<artifact>/iter_<n>.json.
class CavRegistry {
 public:
  explicit CavRegistry(std::filesystem::path root) : root_(std::move(root)) {}

  std::filesystem::path save(const ConceptVector& c) const;
  std::vector<std::size_t> iterations(const std::string& artifact_id) const;
  ConceptVector load(const std::string& artifact_id, std::size_t iteration) const;
  std::optional<ConceptVector> latest(const std::string& artifact_id) const;

 private:
  std::filesystem::path root_;
};

struct RefitRequest {
  std::string artifact_id;
  std::string layer;
  CavMethod method = CavMethod::Svm;
  FeatureSpace space = FeatureSpace::Activation;
  std::optional<std::size_t> target_class;
  std::map<std::string, int> labels;   // sample id -> 0 / 1
  std::map<std::string, int> held_out;  // evaluation labels, never fitted
  std::size_t previous_iteration = 0;
  SvmOptions svm;
};

struct RefitResult {
  ConceptVector cav;
  double auc = 0.0;
  double ap = 0.0;
};

// Needs at least 5 positive and 5 negative labels; throws
// std::invalid_argument("insufficient labels: ...") otherwise.
RefitResult refit_iteration(const Dataset& data, const ClassifierModel& model,
                            const RefitRequest& request);

}  // namespace shortcut
