#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shortcut/model.hpp"

namespace shortcut {

enum class AttributionRule {
  Lrp,       // epsilon on dense layers, z+ on convolutions, flat on a leading conv
  Gradient,  // plain gradient of the target logit
};
std::string to_string(AttributionRule r);
AttributionRule parse_attribution_rule(std::string_view id);

struct RuleConfig {
  AttributionRule rule = AttributionRule::Lrp;
  double epsilon = 1e-6;
  bool flat_first_conv = true;
  // Stop the backward pass once relevance at this layer's output is known.
  std::optional<std::string> stop_layer;
};

struct Attribution {
  Tensor input;                          // [N, C, H, W]; empty if stopped early
  std::map<std::string, Tensor> layers;  // relevance at each layer's output
  Tensor logits;                         // [N, K]
  std::vector<std::size_t> targets;

  const Tensor& at(std::string_view layer) const;
};

// Explains logit[target[n]] of every sample. A single target is broadcast.
// Throws std::out_of_range for an invalid class or layer.
Attribution attribute(const ClassifierModel& model, const Tensor& x,
                      const std::vector<std::size_t>& targets, const RuleConfig& config = {});
Attribution attribute(const ClassifierModel& model, const Tensor& x, std::size_t target,
                      const RuleConfig& config = {});

// Backward pass of the rule starting from a given relevance at the output of
// `layer`. Forward activations come from x.
Attribution propagate_from(const ClassifierModel& model, const Tensor& x, std::string_view layer,
                           const Tensor& relevance, const RuleConfig& config = {});

// R_l = a_l(x) * h (h broadcast over space), propagated to the input.
// Throws std::invalid_argument when h does not match the layer's channels.
Attribution concept_heatmap(const LayerSplit& split, const Tensor& x,
                            const std::vector<double>& cav, const RuleConfig& config = {});

// Sums an input heatmap [N, C, H, W] over channels: [N, H, W].
Tensor channel_summed(const Tensor& heatmap);

enum class ReferenceMode { Activation, Relevance };
std::string to_string(ReferenceMode m);
ReferenceMode parse_reference_mode(std::string_view id);

// Top-k rows of `inputs` for one channel. Activation mode ranks by spatial
// max activation, relevance mode by spatial-sum relevance for each sample's
// predicted class. Ties keep row order.
std::vector<std::size_t> reference_samples(const ClassifierModel& model, std::string_view layer,
                                           std::size_t channel, const Tensor& inputs,
                                           ReferenceMode mode, std::size_t k);

// Per-row scores used by reference_samples, [N, C].
Tensor channel_scores(const ClassifierModel& model, std::string_view layer, const Tensor& inputs,
                      ReferenceMode mode);

// Heatmap exports. PNG uses a blue-white-red map scaled by max |value|;
// CSV writes raw values one row per image row.
void write_heatmap_png(const std::filesystem::path& path, const Tensor& heatmap);  // [H, W]
void write_heatmap_csv(const std::filesystem::path& path, const Tensor& heatmap);

}  // namespace shortcut
