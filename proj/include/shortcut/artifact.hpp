#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "shortcut/dataset.hpp"

namespace shortcut {

enum class ArtifactKind { CircleOcclusion, CornerPatch, BrightnessShift, StaticNoise };
std::string to_string(ArtifactKind k);
ArtifactKind parse_artifact_kind(std::string_view id);

struct ArtifactSpec {
  std::string id = "artifact";
  ArtifactKind kind = ArtifactKind::CornerPatch;
  std::size_t target_class = 1;
  double rate = 0.1;

  // corner-patch: checkerboard glyph of 2x2 cells in this box.
  std::size_t patch_row = 0;
  std::size_t patch_col = 0;
  std::size_t patch_h = 8;
  std::size_t patch_w = 8;
  // circle-occlusion: pixels farther than radius * (min(H, W) / 2) from the
  // image center are set to 0.
  double radius = 0.9;
  // brightness-shift: added to every pixel, then clamped to [0, 1].
  double brightness_delta = 0.25;
  // static-noise: window [start, start + length) as fractions of T on one
  // channel is overwritten with a constant level equal to the clean channel
  // mean plus `amplitude` standard deviations (train split statistics).
  std::size_t channel = 0;
  double window_start = 0.0;
  double window_length = 0.1;
  double amplitude = 5.0;
  std::optional<double> level;  // resolved value; set by inject

  bool localizable() const { return kind != ArtifactKind::BrightnessShift; }
};

// Rates used when a spec does not set one explicitly.
double default_rate(ArtifactKind k);

nlohmann::json to_json(const ArtifactSpec& s);
ArtifactSpec artifact_from_json(const nlohmann::json& j);

// Fills in data-dependent parameters (the static-noise level) and checks the
// spec against the dataset. Throws std::invalid_argument.
ArtifactSpec resolve_artifact(const Dataset& d, ArtifactSpec spec);

// Applies a resolved artifact to one payload. When `mask` is given it receives
// the ground-truth mask ([H, W] for images, [C, T] for signals); it is left
// empty for non-localizable kinds.
Tensor apply_artifact(const Tensor& payload, const ArtifactSpec& spec, Tensor* mask = nullptr);

// Poisons round(rate * n) target-class samples of the train split and,
// independently, of the val split. The test split stays clean. Every sample
// gets a ground-truth annotation (1 poisoned, 0 otherwise) under spec.id.
Dataset inject(const Dataset& d, const ArtifactSpec& spec, std::uint64_t seed);

// The test split with the artifact applied to every sample of every class.
Dataset biased_test_set(const Dataset& d, const ArtifactSpec& spec);
// Same for any split; samples keep their split tag.
Dataset biased_split(const Dataset& d, const ArtifactSpec& spec, Split split);

// Broadcasts a mask to a payload's [C, H, W] shape.
Tensor mask_to_input(const Tensor& mask, const Shape& payload_shape);

}  // namespace shortcut
