#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shortcut/autograd.hpp"
#include "shortcut/tensor.hpp"

namespace shortcut {

enum class Architecture { ImageCnnSmall, SignalCnnSmall, Custom };

std::string to_string(Architecture arch);
Architecture parse_architecture(std::string_view id);

enum class LayerKind { Conv, ReLU, MaxPool, GlobalMaxPool, Flatten, Linear };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view id);

struct Layer {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  // Conv: weight [out, in, kh, kw]. Linear: weight [out, in].
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kh = 1;
  std::size_t kw = 1;
  kernels::ConvGeometry padding{};
  // MaxPool window.
  std::size_t pool_h = 1;
  std::size_t pool_w = 1;
  int weight = -1;  // index into parameters, -1 if none
  int bias = -1;
};

struct Parameter {
  std::string name;
  Tensor value;
};

// Feed-forward classifier as a sequence of layers. Inputs are batches of
// shape [N, C, H, W]; one-dimensional signals use H = 1.
class ClassifierModel {
 public:
  ClassifierModel(Architecture arch, Shape input_shape, std::size_t num_classes,
                  std::uint64_t seed);

  // Builder used by build_model and by tests that assemble small nets.
  // Parameters are initialized (He-uniform weights, zero biases) from the
  // model seed in the order layers are added.
  ClassifierModel& add_conv(const std::string& name, std::size_t in, std::size_t out,
                            std::size_t kh, std::size_t kw, kernels::ConvGeometry padding,
                            bool with_bias = true);
  ClassifierModel& add_relu(const std::string& name);
  ClassifierModel& add_max_pool(const std::string& name, std::size_t kh, std::size_t kw);
  ClassifierModel& add_global_max_pool(const std::string& name);
  ClassifierModel& add_flatten(const std::string& name);
  ClassifierModel& add_linear(const std::string& name, std::size_t in, std::size_t out,
                              bool with_bias = true);

  Architecture architecture() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<std::string> layer_names() const;
  std::size_t layer_index(std::string_view name) const;
  bool has_layer(std::string_view name) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;

  // Parameters wrapped as graph leaves.
  std::vector<ad::Var> bind(bool trainable) const;

  // Runs layers [begin, end) on x. `params` comes from bind().
  ad::Var run(const ad::Var& x, std::span<const ad::Var> params, std::size_t begin,
              std::size_t end) const;
  ad::Var forward(const ad::Var& x, std::span<const ad::Var> params) const {
    return run(x, params, 0, layers_.size());
  }

  // Graph-free conveniences.
  Tensor logits(const Tensor& x) const;
  std::vector<std::size_t> predict(const Tensor& x) const;
  // Output of the named layer for a batch.
  Tensor activations(const Tensor& x, std::string_view layer) const;
  // Per-sample output shape of layer `index` (or of the input for index -1).
  Shape output_shape(std::size_t index) const;

  // Throws std::invalid_argument when the input does not match input_shape.
  void check_input(const Tensor& x) const;

 private:
  int add_parameter(std::string name, Shape shape, std::size_t fan_in, bool zero);

  Architecture arch_;
  Shape input_shape_;
  std::size_t num_classes_;
  std::uint64_t seed_;
  std::uint64_t init_draws_ = 0;
  std::vector<Layer> layers_;
  std::vector<Parameter> params_;
};

// image-cnn-small: 4 x (3x3 conv -> ReLU -> 2x2 max-pool), global max-pool,
// linear head. signal-cnn-small: 3 x (1x7 conv -> ReLU -> 1x4 max-pool), same
// head. input_shape is per sample: {C, H, W} or {C, T}.
ClassifierModel build_model(Architecture arch, std::size_t num_classes, Shape input_shape,
                            std::uint64_t seed);

// f = head o features at a named layer; the named layer's output is the
// activation tensor a_l.
class LayerSplit {
 public:
  LayerSplit(const ClassifierModel& model, std::string_view layer);

  const ClassifierModel& model() const { return *model_; }
  const std::string& layer() const { return layer_; }
  std::size_t index() const { return index_; }
  // Per-sample activation shape [C, H, W].
  Shape activation_shape() const { return model_->output_shape(index_); }
  std::size_t channels() const { return activation_shape().at(0); }

  Tensor features(const Tensor& x) const;
  Tensor head(const Tensor& a) const;

  ad::Var features(const ad::Var& x, std::span<const ad::Var> params) const;
  ad::Var head(const ad::Var& a, std::span<const ad::Var> params) const;

 private:
  const ClassifierModel* model_;
  std::string layer_;
  std::size_t index_;
};

// d(logit[target]) / d(activations at the split layer), per sample of a batch.
Tensor latent_gradient(const LayerSplit& split, const Tensor& x, std::size_t target_class);
// Same, w.r.t. given activations (the head alone is differentiated).
Tensor head_gradient(const LayerSplit& split, const Tensor& activations,
                     std::size_t target_class);
// d(logit[target]) / d(input), per sample.
Tensor input_gradient(const ClassifierModel& model, const Tensor& x, std::size_t target_class);

// Spatial max / mean over all axes after the channel axis: [N, C, ...] -> [N, C].
enum class Pooling { Max, Mean, Sum };
std::string to_string(Pooling p);
Pooling parse_pooling(std::string_view id);
Tensor pool_spatial(const Tensor& x, Pooling p);

// Checkpoint directory: model.json manifest plus one little-endian float32
// file per parameter under params/.
void save_checkpoint(const ClassifierModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& provenance = nlohmann::json::object());
ClassifierModel load_checkpoint(const std::filesystem::path& dir);
nlohmann::json load_checkpoint_provenance(const std::filesystem::path& dir);

}  // namespace shortcut
