#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shortcut/artifact.hpp"
#include "shortcut/bias_model.hpp"
#include "shortcut/dataset.hpp"
#include "shortcut/model.hpp"
#include "shortcut/train.hpp"

namespace shortcut {

enum class MitigationMethod { Vanilla, Rrr, RrClarc, PClarc, RpClarc };
std::string to_string(MitigationMethod m);
MitigationMethod parse_mitigation_method(std::string_view id);
bool is_projection(MitigationMethod m);

enum class MaskSource { GroundTruth, Heatmap, Binarized };
std::string to_string(MaskSource s);
MaskSource parse_mask_source(std::string_view id);

// Sum over batch and input entries of (d sum_k log_softmax_k / dx * m)^2.
// masks has the shape of inputs.
ad::Var rrr_loss(const ClassifierModel& model, std::span<const ad::Var> params, const Tensor& inputs,
                 const Tensor& masks);

// Output whose latent gradient RR-ClArC penalizes: the target logit, or the
// target logit minus the mean of the other logits.
enum class LatentOutput { Logit, Margin };
std::string to_string(LatentOutput o);
LatentOutput parse_latent_output(std::string_view id);

// Batch mean of (sum over space of h . d out / d a)^2 at the layer.
ad::Var rrclarc_loss(const ClassifierModel& model, std::span<const ad::Var> params,
                     std::size_t layer_index, const Tensor& inputs, const std::vector<double>& h,
                     std::size_t target_class, LatentOutput output = LatentOutput::Margin);

// The projection target: mean of h . a over clean samples, either over every
// spatial location or over max-pooled activations.
struct CleanStats {
  double mean = 0.0;
  bool per_location = true;
  std::size_t samples = 0;
};
CleanStats clean_statistics(const LayerSplit& split, const Tensor& clean_inputs,
                            const std::vector<double>& h, bool per_location = true);

// a' = a - (h . a - mu) h with unit h, per location or with the pooled
// projection subtracted everywhere. activations [N, C, H, W].
Tensor pclarc_apply(const Tensor& activations, const std::vector<double>& h, const CleanStats& stats);

// A model with an optional projection inserted after the CAV layer. With a
// gate, only samples whose bias score exceeds it are projected.
class EditedModel {
 public:
  explicit EditedModel(ClassifierModel model) : model_(std::move(model)) {}
  EditedModel(ClassifierModel model, const ConceptVector& cav, CleanStats stats,
              std::optional<double> gate = std::nullopt);

  const ClassifierModel& model() const { return model_; }
  bool edited() const { return cav_.has_value(); }
  const std::optional<ConceptVector>& cav() const { return cav_; }
  const CleanStats& stats() const { return stats_; }
  std::optional<double> gate() const { return gate_; }

  Tensor logits(const Tensor& x) const;
  std::vector<std::size_t> predict(const Tensor& x) const;
  // Which rows of x the projection touches.
  std::vector<bool> projected(const Tensor& x) const;

 private:
  ClassifierModel model_;
  std::optional<ConceptVector> cav_;
  CleanStats stats_;
  std::optional<double> gate_;
};

// Default gate: 95th percentile of clean bias scores.
double default_gate(const ClassifierModel& model, const ConceptVector& cav, const Tensor& clean_inputs,
                    double quantile = 0.95);

struct TcavResult {
  double tcav = 0.0;
  double delta_tcav = 0.5;
  double mean_sensitivity = 0.0;
  std::vector<double> sensitivities;
};

// Sensitivity = sum over space of d logit[target] / d a . h with unit h.
// Values with |s| <= 1e-12 count as zero, and zero counts as non-positive.
TcavResult tcav_metrics(const LayerSplit& split, const Tensor& inputs, const std::vector<double>& h,
                        std::size_t target_class);
TcavResult tcav_metrics(const EditedModel& model, const ConceptVector& cav, const Tensor& inputs,
                        std::size_t target_class);

struct EvalReport {
  std::string method = "vanilla";
  double clean_accuracy = 0.0;
  double biased_accuracy = 0.0;
  double fpr_clean = 0.0;
  double fpr_biased = 0.0;
  std::optional<double> artifact_relevance;
  double tcav = 0.0;
  double delta_tcav = 0.5;
  double mean_sensitivity = 0.0;
  std::optional<double> auc;
  std::optional<double> ap;
  nlohmann::json details = nlohmann::json::object();
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

// FPR: share of samples not of the attacked class predicted as it.
double false_positive_rate(const std::vector<std::size_t>& predicted,
                           const std::vector<std::size_t>& labels, std::size_t attacked);

// Mean positive-relevance share inside the ground-truth masks of `data`
// (LRP of the attacked class). Projection-edited models return nullopt.
std::optional<double> artifact_relevance(const EditedModel& model, const Dataset& data,
                                         const std::string& artifact_id, std::size_t attacked);

// `data` holds the clean test split; the biased test set is derived from spec.
// cav (optional) drives TCAV and held-out AUC/AP on the val split.
EvalReport evaluate(const EditedModel& model, const Dataset& data, const ArtifactSpec& spec,
                    const std::optional<ConceptVector>& cav);

struct MitigationConfig {
  MitigationMethod method = MitigationMethod::RrClarc;
  std::vector<double> lambda_grid;        // empty means the default grid
  std::optional<std::size_t> target_class;  // rrclarc; defaults to the attacked class
  LatentOutput latent_output = LatentOutput::Margin;  // rrclarc
  MaskSource mask_source = MaskSource::GroundTruth;
  std::size_t epochs = 5;
  double learning_rate = 0.005;  // already divided by 10
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<double> gate;  // rpclarc
  bool per_location = true;    // pclarc
  double max_clean_drop = 0.05;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

std::vector<double> default_lambda_grid(MitigationMethod m);

struct LambdaTrial {
  double lambda = 0.0;
  bool ok = false;
  std::string error;
  double clean_val = 0.0;
  double biased_val = 0.0;
};

struct MitigationResult {
  EditedModel model;
  double lambda = 0.0;
  std::vector<LambdaTrial> trials;
  EvalReport report;
};

// Per-sample input masks for RRR, [N, C, H, W] over the rows of train.
Tensor rrr_masks(const ClassifierModel& model, const Dataset& data, const std::vector<std::size_t>& rows,
                 const ArtifactSpec& spec, MaskSource source, const std::optional<ConceptVector>& cav);

// Fine-tunes (rrr, rrclarc, vanilla) or edits (pclarc, rpclarc) `model`.
// Penalty methods pick lambda by best biased-val accuracy among trials whose
// clean-val accuracy is within max_clean_drop of the unmitigated model.
MitigationResult mitigate(const ClassifierModel& model, const Dataset& data, const ArtifactSpec& spec,
                          const std::optional<ConceptVector>& cav, const MitigationConfig& config);

// One fine-tuning run at a fixed lambda.
TrainResult finetune(const ClassifierModel& model, const Dataset& data, const ArtifactSpec& spec,
                     const std::optional<ConceptVector>& cav, const MitigationConfig& config,
                     double lambda);

}  // namespace shortcut
