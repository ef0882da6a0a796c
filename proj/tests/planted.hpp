#pragma once

// Hand-wired models with a known artifact detector, used as oracles.

#include "shortcut/artifact.hpp"
#include "shortcut/model.hpp"

namespace shortcut::testing {

// Checkerboard glyph of the corner-patch artifact as a +-1 matched filter.
inline Tensor glyph_filter(const ArtifactSpec& spec) {
  Tensor w({1, 1, spec.patch_h, spec.patch_w});
  for (std::size_t y = 0; y < spec.patch_h; ++y)
    for (std::size_t x = 0; x < spec.patch_w; ++x)
      w[y * spec.patch_w + x] = ((y / 2) + (x / 2)) % 2 == 0 ? 1.0 : -1.0;
  return w;
}

// conv1 ("det") has `channels` channels on a one-channel image. Channel
// `detector` is the glyph matched filter with a threshold at half the full
// response, so it fires only where the glyph is present. The remaining
// channels are box filters of different sizes with shifted biases (smooth
// "shape" responses). The head reads the detector as evidence for class 1
// and the other channels for class 0.
inline ClassifierModel planted_detector_model(const ArtifactSpec& spec, std::size_t side,
                                              std::size_t channels = 4,
                                              std::size_t detector = 0) {
  ClassifierModel m(Architecture::Custom, {1, side, side}, 2, 0);
  m.add_conv("det", 1, channels, spec.patch_h, spec.patch_w, {0, 0});
  m.add_relu("relu").add_global_max_pool("gmp").add_flatten("flatten");
  m.add_linear("fc", channels, 2);
  Tensor& w = m.parameter("det.weight").value;
  Tensor& b = m.parameter("det.bias").value;
  const Tensor g = glyph_filter(spec);
  const std::size_t k = spec.patch_h * spec.patch_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t y = i / spec.patch_w, x = i % spec.patch_w;
      if (c == detector) {
        w[c * k + i] = g[i];
      } else {
        // Centered box of growing size.
        const std::size_t r = 1 + c % 3;
        const bool in = y + r >= spec.patch_h / 2 && y < spec.patch_h / 2 + r &&
                        x + r >= spec.patch_w / 2 && x < spec.patch_w / 2 + r;
        w[c * k + i] = in ? 1.0 / static_cast<double>(4 * r * r) : 0.0;
      }
    }
    b[c] = c == detector ? -0.5 * static_cast<double>(k) / 2.0 : -0.1 * static_cast<double>(c);
  }
  Tensor& fc = m.parameter("fc.weight").value;
  for (std::size_t c = 0; c < channels; ++c) {
    fc[0 * channels + c] = c == detector ? 0.0 : 1.0;
    fc[1 * channels + c] = c == detector ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace shortcut::testing
