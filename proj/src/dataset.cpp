#include "shortcut/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "shortcut/io.hpp"
#include "shortcut/rng.hpp"

namespace shortcut {

using nlohmann::json;

std::string to_string(Modality m) { return m == Modality::Image ? "image" : "signal1d"; }

Modality parse_modality(std::string_view id) {
  if (id == "image") return Modality::Image;
  if (id == "signal1d" || id == "signal") return Modality::Signal;
  throw std::invalid_argument("unknown modality '" + std::string(id) + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view id) {
  if (id == "train") return Split::Train;
  if (id == "val") return Split::Val;
  if (id == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(id) + "'");
}

Shape Dataset::sample_shape() const {
  if (samples.empty()) throw std::logic_error("dataset '" + name + "' has no samples");
  return samples.front().payload.shape();
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) out.push_back(i);
  }
  return out;
}

std::unordered_map<std::string, std::size_t> Dataset::id_index() const {
  std::unordered_map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.emplace(samples[i].id, i);
  return out;
}

std::optional<std::size_t> Dataset::find(std::string_view id) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].id == id) return i;
  }
  return std::nullopt;
}

TrainingSet Dataset::training_set(Split s) const { return training_set(indices(s)); }

TrainingSet Dataset::training_set(const std::vector<std::size_t>& rows) const {
  TrainingSet t;
  if (rows.empty()) {
    Shape s = samples.empty() ? Shape{1, 1, 1} : sample_shape();
    s.insert(s.begin(), 0);
    t.inputs = Tensor(s);
    return t;
  }
  std::vector<Tensor> payloads;
  payloads.reserve(rows.size());
  for (std::size_t r : rows) {
    payloads.push_back(samples.at(r).payload);
    t.labels.push_back(samples[r].label);
  }
  t.inputs = stack(payloads);
  return t;
}

const json* Dataset::artifact(std::string_view id) const {
  for (const json& a : artifacts) {
    if (a.value("id", "") == id) return &a;
  }
  return nullptr;
}

void validate(const Dataset& d) {
  if (d.classes.size() < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  std::set<std::string> ids;
  for (const Sample& s : d.samples) {
    if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate sample id " + s.id);
    if (s.label >= d.classes.size()) {
      throw std::invalid_argument("sample " + s.id + " has label out of range");
    }
    if (s.payload.shape() != d.samples.front().payload.shape()) {
      throw std::invalid_argument("sample " + s.id + " has payload shape " +
                                  shape_string(s.payload.shape()));
    }
  }
  for (const auto& [artifact, masks] : d.masks) {
    auto it = d.annotations.find(artifact);
    for (const auto& [id, mask] : masks) {
      if (!ids.count(id)) throw std::invalid_argument("mask for unknown sample " + id);
      if (it == d.annotations.end() || !it->second.count(id) || it->second.at(id) != 1) {
        throw std::invalid_argument("sample " + id + " has a " + artifact +
                                    " mask but is not annotated 1");
      }
    }
  }
}

namespace {

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

// Anti-aliased coverage of a shape by 3x3 supersampling.
template <typename Inside>
double coverage(double x, double y, Inside inside) {
  int hits = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) hits += inside(x + (i - 1) / 3.0, y + (j - 1) / 3.0);
  }
  return hits / 9.0;
}

Tensor synth_image(std::size_t label, const Shape& shape, double noise, Rng& rng) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  const double side = static_cast<double>(std::min(h, w));
  const double r = side * rng.uniform(0.2, 0.3);
  const double cx = rng.uniform(r + 2.0, static_cast<double>(w) - r - 2.0);
  const double cy = rng.uniform(r + 2.0, static_cast<double>(h) - r - 2.0);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double aspect = rng.uniform(0.55, 0.85);
  const double bg = rng.uniform(0.15, 0.3);
  const double fg = rng.uniform(0.6, 0.85);
  const double ca = std::cos(angle), sa = std::sin(angle);

  auto inside = [&](double px, double py) {
    const double dx = px - cx, dy = py - cy;
    const double u = (ca * dx + sa * dy) / r, v = (-sa * dx + ca * dy) / r;
    switch (label % 4) {
      case 0: return u * u + (v / aspect) * (v / aspect) <= 1.0;  // ellipse
      case 1: {  // triangle with vertices on the unit circle
        for (int k = 0; k < 3; ++k) {
          const double a0 = 2.0 * std::numbers::pi * k / 3.0;
          const double a1 = 2.0 * std::numbers::pi * (k + 1) / 3.0;
          const double ex = std::cos(a1) - std::cos(a0), ey = std::sin(a1) - std::sin(a0);
          if (ex * (v - std::sin(a0)) - ey * (u - std::cos(a0)) < 0.0) return false;
        }
        return true;
      }
      case 2: {  // ring
        const double d = u * u + v * v;
        return d <= 1.0 && d >= 0.45;
      }
      default:  // cross
        return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) ||
               (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    }
  };

  std::vector<double> tint(c, 1.0);
  for (std::size_t k = 1; k < c; ++k) tint[k] = rng.uniform(0.7, 1.0);
  Tensor img({c, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double cov = coverage(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5,
                                  inside);
      const double base = bg + (fg - bg) * cov;
      for (std::size_t k = 0; k < c; ++k) {
        img[(k * h + y) * w + x] = quantize(base * tint[k] + noise * rng.normal());
      }
    }
  }
  return img;
}

Tensor synth_signal(std::size_t label, const Shape& shape, double noise, Rng& rng) {
  const std::size_t c = shape[0], t = shape[2];
  Tensor sig({c, 1, t});
  const double cycles = 3.0 + 3.0 * static_cast<double>(label);
  for (std::size_t k = 0; k < c; ++k) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = rng.uniform(0.8, 1.2);
    const double f = cycles * (1.0 + 0.5 * static_cast<double>(k));
    for (std::size_t i = 0; i < t; ++i) {
      const double s = static_cast<double>(i) / static_cast<double>(t);
      const double arg = 2.0 * std::numbers::pi * f * s + phase;
      // Second harmonic weight differs per class so morphology differs too.
      sig[k * t + i] = amp * (std::sin(arg) + 0.3 * (label % 2 ? 1.0 : -1.0) *
                                                  std::sin(2.0 * arg)) +
                       noise * rng.normal();
    }
  }
  return sig;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& config) {
  Shape shape = config.shape;
  if (config.modality == Modality::Signal) {
    if (shape.size() == 2) shape = {shape[0], 1, shape[1]};
    if (shape.size() != 3 || shape[1] != 1) {
      throw std::invalid_argument("signal shape must be {C, T}");
    }
  } else if (shape.size() != 3 || (shape[0] != 1 && shape[0] != 3)) {
    throw std::invalid_argument("image shape must be {1|3, H, W}");
  }
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("shape dimensions must be positive");
  }
  if (config.modality == Modality::Image && std::min(shape[1], shape[2]) < 16) {
    throw std::invalid_argument("image side must be at least 16 pixels");
  }
  if (config.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (config.samples_per_class < 30) {
    throw std::invalid_argument("samples_per_class must be >= 30");
  }

  Dataset d;
  d.name = "synthetic-" + to_string(config.modality);
  d.modality = config.modality;
  static const char* image_names[] = {"ellipse", "triangle", "ring", "cross"};
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    d.classes.push_back(config.modality == Modality::Image && k < 4
                            ? std::string(image_names[k])
                            : "class" + std::to_string(k));
  }
  const std::size_t n = config.samples_per_class;
  const std::size_t n_train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(n)));
  const std::size_t n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
  char id[32];
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t index = k * n + i;
      Rng rng(derive_seed(config.seed, index));
      Sample s;
      std::snprintf(id, sizeof id, "s%05zu", index);
      s.id = id;
      s.label = k;
      s.split = i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test;
      s.payload = config.modality == Modality::Image
                      ? synth_image(k, shape, config.noise, rng)
                      : synth_signal(k, shape, config.noise, rng);
      d.samples.push_back(std::move(s));
    }
  }
  return d;
}

namespace {

std::filesystem::path payload_path(const Dataset& d, const std::string& id) {
  return d.modality == Modality::Image ? std::filesystem::path("images") / (id + ".png")
                                       : std::filesystem::path("signals") / (id + ".csv");
}

void write_payload(Modality m, const std::filesystem::path& path, const Tensor& payload) {
  if (m == Modality::Image) {
    io::write_png(path, payload);
  } else {
    io::write_csv(path, payload.reshaped({payload.dim(0), payload.dim(2)}));
  }
}

Tensor read_payload(Modality m, const std::filesystem::path& path) {
  if (m == Modality::Image) return io::read_png(path);
  Tensor rows = io::read_csv(path);
  return rows.reshaped({rows.dim(0), 1, rows.dim(1)});
}

}  // namespace

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  validate(d);
  namespace fs = std::filesystem;
  fs::create_directories(dir / (d.modality == Modality::Image ? "images" : "signals"));
  json manifest = {{"format", "shortcut-dataset/1"},
                   {"name", d.name},
                   {"modality", to_string(d.modality)},
                   {"classes", d.classes},
                   {"samples", json::array()},
                   {"annotations", json::object()},
                   {"masks", json::object()},
                   {"artifacts", d.artifacts}};
  if (!d.samples.empty()) {
    Shape s = d.sample_shape();
    manifest["shape"] = d.modality == Modality::Image ? json(s) : json({s[0], s[2]});
  }
  for (const Sample& s : d.samples) {
    const fs::path rel = payload_path(d, s.id);
    write_payload(d.modality, dir / rel, s.payload);
    manifest["samples"].push_back(
        {{"id", s.id}, {"path", rel.generic_string()}, {"label", s.label},
         {"split", to_string(s.split)}});
  }
  for (const auto& [artifact, labels] : d.annotations) manifest["annotations"][artifact] = labels;
  for (const auto& [artifact, masks] : d.masks) {
    const fs::path sub = fs::path("masks") / artifact;
    fs::create_directories(dir / sub);
    json entries = json::object();
    for (const auto& [id, mask] : masks) {
      fs::path rel = sub / (id + (d.modality == Modality::Image ? ".png" : ".csv"));
      if (d.modality == Modality::Image) {
        io::write_png(dir / rel, mask.reshaped({1, mask.dim(0), mask.dim(1)}));
      } else {
        io::write_csv(dir / rel, mask);
      }
      entries[id] = rel.generic_string();
    }
    manifest["masks"][artifact] = entries;
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("manifest.json: " + std::string(e.what()));
  }
  Dataset d;
  d.name = manifest.value("name", dir.filename().string());
  d.modality = parse_modality(manifest.at("modality").get<std::string>());
  d.classes = manifest.at("classes").get<std::vector<std::string>>();
  for (const json& s : manifest.at("samples")) {
    Sample sample;
    sample.id = s.at("id").get<std::string>();
    sample.label = s.at("label").get<std::size_t>();
    sample.split = parse_split(s.at("split").get<std::string>());
    sample.payload = read_payload(d.modality, dir / s.at("path").get<std::string>());
    d.samples.push_back(std::move(sample));
  }
  if (manifest.contains("annotations")) {
    for (const auto& [artifact, labels] : manifest["annotations"].items()) {
      for (const auto& [id, v] : labels.items()) d.annotations[artifact][id] = v.get<int>();
    }
  }
  if (manifest.contains("masks")) {
    for (const auto& [artifact, entries] : manifest["masks"].items()) {
      for (const auto& [id, rel] : entries.items()) {
        const std::filesystem::path p = dir / rel.get<std::string>();
        Tensor m;
        if (d.modality == Modality::Image) {
          Tensor img = io::read_png(p);
          m = img.slice(0, 1).reshaped({img.dim(1), img.dim(2)});
          for (double& v : m.values()) v = v >= 0.5 ? 1.0 : 0.0;
        } else {
          m = io::read_csv(p);
        }
        d.masks[artifact][id] = std::move(m);
      }
    }
  }
  if (manifest.contains("artifacts")) {
    for (const json& a : manifest["artifacts"]) d.artifacts.push_back(a);
  }
  validate(d);
  return d;
}

}  // namespace shortcut
