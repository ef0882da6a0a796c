#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortcut/attribution.hpp"
#include "shortcut/bias_model.hpp"
#include "shortcut/model.hpp"

namespace shortcut {

struct BiasScoreTable {
  std::string artifact_id;
  std::size_t cav_iteration = 0;
  FeatureSpace kind = FeatureSpace::Activation;
  std::optional<std::size_t> target_class;
  std::vector<std::string> sample_ids;
  std::vector<double> scores;

  std::size_t size() const { return scores.size(); }
};

// unit(h) . row for each row of features [N, C].
std::vector<double> project(const Tensor& features, const ConceptVector& cav);

BiasScoreTable bias_scores_activation(const ConceptVector& cav, const ClassifierModel& model,
                                      const std::vector<std::string>& ids, const Tensor& inputs);
// The CAV must be a relevance CAV; target_class defaults to the CAV's.
BiasScoreTable bias_scores_relevance(const ConceptVector& cav, const ClassifierModel& model,
                                     const std::vector<std::string>& ids, const Tensor& inputs,
                                     std::optional<std::size_t> target_class = std::nullopt);

struct RetrievalMetrics {
  double auc = 0.0;
  double ap = 0.0;
};

// Mann-Whitney AUC, ties count 1/2. truth is 0 / 1.
double auc_score(const std::vector<double>& scores, const std::vector<int>& truth);
// Sum over positives of precision at their rank; tied scores share one
// threshold.
double average_precision(const std::vector<double>& scores, const std::vector<int>& truth);
RetrievalMetrics retrieval_metrics(const std::vector<double>& scores, const std::vector<int>& truth);
// Restricted to samples present in `truth`.
RetrievalMetrics retrieval_metrics(const BiasScoreTable& table,
                                   const std::map<std::string, int>& truth);

struct InspectionQueue {
  std::string artifact_id;
  std::size_t cav_iteration = 0;
  std::vector<std::string> order;  // all candidates, descending score
  std::vector<double> scores;
  std::size_t page_size = 0;
  // Exemplars at the 1st, 50th and 99th percentile of each subset
  // ("positive", "negative", "unlabeled").
  std::map<std::string, std::vector<std::string>> exemplars;

  std::size_t page_count() const;
  std::vector<std::string> page(std::size_t index) const;
};

// Candidates exclude samples labeled 1. With exclude_negatives, samples
// labeled 0 are dropped as well.
InspectionQueue rank_for_inspection(const BiasScoreTable& scores,
                                    const std::map<std::string, int>& annotations,
                                    std::size_t page_size, bool exclude_negatives = false);

struct OtsuResult {
  // Lowest value of the upper class: mask = value >= threshold.
  double threshold = std::numeric_limits<double>::infinity();
  std::size_t bin = 0;  // last bin of the lower class
};

// Otsu over the positive part of `values`: clipped at 0, scaled to bins
// 0..255 by the maximum. No positive value gives an infinite threshold.
OtsuResult otsu_threshold(const std::vector<double>& values);
// Bin index on the same scale (max maps to 255).
std::vector<std::size_t> otsu_bins(const std::vector<double>& values);

enum class RelevanceSign { Positive, Absolute, Signed };
std::string to_string(RelevanceSign s);
RelevanceSign parse_relevance_sign(std::string_view id);

// Element-wise on same-shaped 0 / 1 masks. Both empty gives 0.
double iou(const Tensor& a, const Tensor& b);
// Share of heatmap mass inside mask under the sign policy; 0 if no mass.
double relevance_fraction(const Tensor& heatmap, const Tensor& mask,
                          RelevanceSign sign = RelevanceSign::Positive);

// Reduces an input heatmap [C, H, W] to mask layout: [H, W] for images
// (channel sum), [C, T] for signals (H = 1).
Tensor heatmap_to_mask_layout(const Tensor& heatmap);

struct LocalizationResult {
  std::string sample_id;
  std::string artifact_id;
  Tensor heatmap;  // mask layout
  Tensor mask;     // 0 / 1, same shape
  double threshold = 0.0;
  std::optional<double> iou;
  std::optional<double> relevance_fraction;
};

// `x` is a single sample [1, C, H, W]; truth in mask layout.
LocalizationResult localize(const ConceptVector& cav, const LayerSplit& split, const Tensor& x,
                            const std::optional<Tensor>& truth = std::nullopt,
                            RelevanceSign sign = RelevanceSign::Positive,
                            const RuleConfig& rule = {});

nlohmann::json to_json(const BiasScoreTable& t);
nlohmann::json to_json(const InspectionQueue& q);
nlohmann::json to_json(const LocalizationResult& r);
// id,score[,label]
void write_scores_csv(const std::filesystem::path& path, const BiasScoreTable& t,
                      const std::map<std::string, int>& labels = {});

}  // namespace shortcut
