#include "shortcut/artifact.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "shortcut/rng.hpp"

namespace shortcut {

using nlohmann::json;

std::string to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::CircleOcclusion: return "circle-occlusion";
    case ArtifactKind::CornerPatch: return "corner-patch";
    case ArtifactKind::BrightnessShift: return "brightness-shift";
    case ArtifactKind::StaticNoise: return "static-noise-segment";
  }
  return "corner-patch";
}

ArtifactKind parse_artifact_kind(std::string_view id) {
  for (ArtifactKind k : {ArtifactKind::CircleOcclusion, ArtifactKind::CornerPatch,
                         ArtifactKind::BrightnessShift, ArtifactKind::StaticNoise}) {
    if (to_string(k) == id) return k;
  }
  if (id == "static-noise") return ArtifactKind::StaticNoise;
  throw std::invalid_argument("unknown artifact kind '" + std::string(id) + "'");
}

double default_rate(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::CircleOcclusion: return 0.2;
    case ArtifactKind::CornerPatch: return 0.1;
    case ArtifactKind::BrightnessShift: return 0.1;
    case ArtifactKind::StaticNoise: return 0.5;
  }
  return 0.1;
}

json to_json(const ArtifactSpec& s) {
  json j = {{"id", s.id},
            {"kind", to_string(s.kind)},
            {"target_class", s.target_class},
            {"rate", s.rate},
            {"localizable", s.localizable()}};
  switch (s.kind) {
    case ArtifactKind::CornerPatch:
      j["patch"] = {s.patch_row, s.patch_col, s.patch_h, s.patch_w};
      break;
    case ArtifactKind::CircleOcclusion: j["radius"] = s.radius; break;
    case ArtifactKind::BrightnessShift: j["brightness_delta"] = s.brightness_delta; break;
    case ArtifactKind::StaticNoise:
      j["channel"] = s.channel;
      j["window_start"] = s.window_start;
      j["window_length"] = s.window_length;
      j["amplitude"] = s.amplitude;
      if (s.level) j["level"] = *s.level;
      break;
  }
  return j;
}

ArtifactSpec artifact_from_json(const json& j) {
  ArtifactSpec s;
  s.id = j.value("id", s.id);
  s.kind = parse_artifact_kind(j.at("kind").get<std::string>());
  s.target_class = j.value("target_class", s.target_class);
  s.rate = j.value("rate", default_rate(s.kind));
  if (j.contains("patch")) {
    auto p = j["patch"].get<std::vector<std::size_t>>();
    if (p.size() != 4) throw std::invalid_argument("patch must be [row, col, h, w]");
    s.patch_row = p[0];
    s.patch_col = p[1];
    s.patch_h = p[2];
    s.patch_w = p[3];
  }
  s.radius = j.value("radius", s.radius);
  s.brightness_delta = j.value("brightness_delta", s.brightness_delta);
  s.channel = j.value("channel", s.channel);
  s.window_start = j.value("window_start", s.window_start);
  s.window_length = j.value("window_length", s.window_length);
  s.amplitude = j.value("amplitude", s.amplitude);
  if (j.contains("level")) s.level = j["level"].get<double>();
  return s;
}

namespace {

struct Window {
  std::size_t begin, end;
};

Window noise_window(const ArtifactSpec& s, std::size_t t) {
  const auto begin = static_cast<std::size_t>(std::floor(s.window_start * static_cast<double>(t)));
  const auto len = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(s.window_length * static_cast<double>(t))));
  return {std::min(begin, t), std::min(begin + len, t)};
}

}  // namespace

ArtifactSpec resolve_artifact(const Dataset& d, ArtifactSpec spec) {
  if (spec.rate < 0.0 || spec.rate > 1.0) throw std::invalid_argument("rate must be in [0, 1]");
  if (spec.target_class >= d.num_classes()) {
    throw std::invalid_argument("target class " + std::to_string(spec.target_class) +
                                " does not exist");
  }
  if (d.samples.empty()) return spec;
  const Shape shape = d.sample_shape();
  const bool signal = d.modality == Modality::Signal;
  switch (spec.kind) {
    case ArtifactKind::StaticNoise: {
      if (!signal) throw std::invalid_argument("static-noise-segment requires signal1d data");
      if (spec.channel >= shape[0]) throw std::invalid_argument("static-noise channel range");
      if (spec.window_start < 0.0 || spec.window_start >= 1.0 || spec.window_length <= 0.0) {
        throw std::invalid_argument("static-noise window out of range");
      }
      if (!spec.level) {
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        const std::size_t t = shape[2];
        for (std::size_t i : d.indices(Split::Train)) {
          const Tensor& p = d.samples[i].payload;
          for (std::size_t k = 0; k < t; ++k) {
            const double v = p[spec.channel * t + k];
            sum += v;
            sq += v * v;
            ++n;
          }
        }
        if (n == 0) throw std::invalid_argument("static-noise level needs a train split");
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
        spec.level = mean + spec.amplitude * std::sqrt(var);
      }
      break;
    }
    case ArtifactKind::CornerPatch:
      if (signal) throw std::invalid_argument("corner-patch requires image data");
      if (spec.patch_h == 0 || spec.patch_w == 0 || spec.patch_row + spec.patch_h > shape[1] ||
          spec.patch_col + spec.patch_w > shape[2]) {
        throw std::invalid_argument("patch exceeds image bounds");
      }
      break;
    case ArtifactKind::CircleOcclusion:
      if (signal) throw std::invalid_argument("circle-occlusion requires image data");
      if (spec.radius <= 0.0) throw std::invalid_argument("radius must be positive");
      break;
    case ArtifactKind::BrightnessShift:
      if (signal) throw std::invalid_argument("brightness-shift requires image data");
      break;
  }
  return spec;
}

Tensor apply_artifact(const Tensor& payload, const ArtifactSpec& spec, Tensor* mask) {
  Tensor out = payload;
  const std::size_t c = payload.dim(0), h = payload.dim(1), w = payload.dim(2);
  Tensor m;
  switch (spec.kind) {
    case ArtifactKind::CornerPatch: {
      m = Tensor({h, w});
      for (std::size_t y = spec.patch_row; y < spec.patch_row + spec.patch_h; ++y) {
        for (std::size_t x = spec.patch_col; x < spec.patch_col + spec.patch_w; ++x) {
          const bool on = (((y - spec.patch_row) / 2) + ((x - spec.patch_col) / 2)) % 2 == 0;
          for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = on ? 1.0 : 0.0;
          m[y * w + x] = 1.0;
        }
      }
      break;
    }
    case ArtifactKind::CircleOcclusion: {
      m = Tensor({h, w});
      const double r = spec.radius * static_cast<double>(std::min(h, w)) / 2.0;
      const double cy = static_cast<double>(h) / 2.0, cx = static_cast<double>(w) / 2.0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          if (dx * dx + dy * dy <= r * r) continue;
          for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = 0.0;
          m[y * w + x] = 1.0;
        }
      }
      break;
    }
    case ArtifactKind::BrightnessShift: {
      const double delta = std::round(spec.brightness_delta * 255.0) / 255.0;
      for (double& v : out.values()) v = std::clamp(v + delta, 0.0, 1.0);
      break;
    }
    case ArtifactKind::StaticNoise: {
      if (!spec.level) throw std::logic_error("static-noise artifact applied before resolve");
      m = Tensor({c, w});
      const Window win = noise_window(spec, w);
      for (std::size_t t = win.begin; t < win.end; ++t) {
        out[spec.channel * w + t] = *spec.level;
        m[spec.channel * w + t] = 1.0;
      }
      break;
    }
  }
  if (mask) *mask = std::move(m);
  return out;
}

Dataset inject(const Dataset& d, const ArtifactSpec& raw, std::uint64_t seed) {
  if (d.annotations.count(raw.id) || d.artifact(raw.id)) {
    throw std::invalid_argument("artifact '" + raw.id + "' already present");
  }
  const ArtifactSpec spec = resolve_artifact(d, raw);
  Dataset out = d;
  auto& labels = out.annotations[spec.id];
  for (const Sample& s : out.samples) labels[s.id] = 0;

  std::uint64_t stream = 0;
  for (Split split : {Split::Train, Split::Val}) {
    std::vector<std::size_t> pool;
    for (std::size_t i : d.indices(split)) {
      if (d.samples[i].label == spec.target_class) pool.push_back(i);
    }
    const auto count =
        static_cast<std::size_t>(std::lround(spec.rate * static_cast<double>(pool.size())));
    Rng rng(derive_seed(seed, stream++));
    rng.shuffle(std::span(pool));
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    for (std::size_t i : pool) {
      Sample& s = out.samples[i];
      Tensor mask;
      s.payload = apply_artifact(s.payload, spec, &mask);
      labels[s.id] = 1;
      if (spec.localizable()) out.masks[spec.id][s.id] = std::move(mask);
    }
  }
  out.artifacts.push_back(to_json(spec));
  return out;
}

Dataset biased_test_set(const Dataset& d, const ArtifactSpec& spec) {
  return biased_split(d, spec, Split::Test);
}

Dataset biased_split(const Dataset& d, const ArtifactSpec& raw, Split split) {
  const ArtifactSpec spec = resolve_artifact(d, raw);
  Dataset out;
  out.name = d.name + "-biased-" + spec.id + "-" + to_string(split);
  out.modality = d.modality;
  out.classes = d.classes;
  for (std::size_t i : d.indices(split)) {
    Sample s = d.samples[i];
    Tensor mask;
    s.payload = apply_artifact(s.payload, spec, &mask);
    out.annotations[spec.id][s.id] = 1;
    if (spec.localizable()) out.masks[spec.id][s.id] = std::move(mask);
    out.samples.push_back(std::move(s));
  }
  out.artifacts.push_back(to_json(spec));
  return out;
}

Tensor mask_to_input(const Tensor& mask, const Shape& payload_shape) {
  const std::size_t c = payload_shape.at(0), h = payload_shape.at(1), w = payload_shape.at(2);
  Tensor out({c, h, w});
  if (mask.rank() == 2 && mask.dim(0) == h && mask.dim(1) == w) {
    for (std::size_t k = 0; k < c; ++k) {
      std::copy_n(mask.data(), h * w, out.data() + k * h * w);
    }
  } else if (mask.rank() == 2 && h == 1 && mask.dim(0) == c && mask.dim(1) == w) {
    std::copy_n(mask.data(), c * w, out.data());
  } else {
    throw std::invalid_argument("mask shape " + shape_string(mask.shape()) +
                                " does not fit payload " + shape_string(payload_shape));
  }
  return out;
}

}  // namespace shortcut
