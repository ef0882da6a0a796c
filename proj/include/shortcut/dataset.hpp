#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "shortcut/tensor.hpp"
#include "shortcut/train.hpp"

namespace shortcut {

enum class Modality { Image, Signal };
std::string to_string(Modality m);
Modality parse_modality(std::string_view id);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(std::string_view id);

struct Sample {
  std::string id;
  std::size_t label = 0;
  Split split = Split::Train;
  Tensor payload;  // [C, H, W]; signals are [C, 1, T]
};

// Labeled samples plus per-artifact annotations and ground-truth masks.
// Image masks are [H, W]; signal masks are [C, T].
struct Dataset {
  std::string name;
  Modality modality = Modality::Image;
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  // artifact id -> sample id -> 0/1. A missing entry means unknown.
  std::map<std::string, std::map<std::string, int>> annotations;
  std::map<std::string, std::map<std::string, Tensor>> masks;
  // Serialized ArtifactSpec of every injected artifact.
  std::vector<nlohmann::json> artifacts;

  std::size_t num_classes() const { return classes.size(); }
  // Per-sample payload shape; {C, H, W} (signals {C, 1, T}).
  Shape sample_shape() const;
  std::vector<std::size_t> indices(Split s) const;
  std::unordered_map<std::string, std::size_t> id_index() const;
  std::optional<std::size_t> find(std::string_view id) const;
  // Stacks the given rows (or a whole split) for training and evaluation.
  TrainingSet training_set(Split s) const;
  TrainingSet training_set(const std::vector<std::size_t>& rows) const;
  const nlohmann::json* artifact(std::string_view id) const;
};

// Checks unique ids, label range, consistent payload shapes, and that every
// masked sample is annotated 1. Throws std::invalid_argument.
void validate(const Dataset& d);

// Synthetic classes. Images: one parametric shape family per class on a
// noisy background, pixel values on the 1/255 grid. Signals: per-class
// frequency templates plus noise. Per class the split is 0.8/0.1/0.1.
struct SynthConfig {
  Modality modality = Modality::Image;
  std::size_t num_classes = 2;
  std::size_t samples_per_class = 300;
  Shape shape{1, 48, 48};  // {C, H, W} or {C, T}
  std::uint64_t seed = 0;
  double noise = 0.08;     // background/additive noise standard deviation
};
Dataset generate_synthetic(const SynthConfig& config);

// Directory layout: manifest.json, images/<id>.png or signals/<id>.csv,
// masks/<artifact>/<id>.png|csv. Paths in the manifest are relative.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace shortcut
