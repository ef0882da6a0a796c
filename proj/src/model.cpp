#include "shortcut/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "shortcut/rng.hpp"

namespace shortcut {

using nlohmann::json;

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::ImageCnnSmall: return "image-cnn-small";
    case Architecture::SignalCnnSmall: return "signal-cnn-small";
    case Architecture::Custom: return "custom";
  }
  return "custom";
}

Architecture parse_architecture(std::string_view id) {
  if (id == "image-cnn-small") return Architecture::ImageCnnSmall;
  if (id == "signal-cnn-small") return Architecture::SignalCnnSmall;
  if (id == "custom") return Architecture::Custom;
  throw std::invalid_argument("unknown architecture id '" + std::string(id) + "'");
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::GlobalMaxPool: return "global_max_pool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
  }
  return "relu";
}

LayerKind parse_layer_kind(std::string_view id) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::ReLU, LayerKind::MaxPool,
                      LayerKind::GlobalMaxPool, LayerKind::Flatten, LayerKind::Linear}) {
    if (to_string(k) == id) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(id) + "'");
}

ClassifierModel::ClassifierModel(Architecture arch, Shape input_shape, std::size_t num_classes,
                                 std::uint64_t seed)
    : arch_(arch), input_shape_(std::move(input_shape)), num_classes_(num_classes), seed_(seed) {
  if (input_shape_.size() == 2) input_shape_ = {input_shape_[0], 1, input_shape_[1]};
  if (input_shape_.size() != 3) {
    throw std::invalid_argument("input shape must be {C,H,W} or {C,T}");
  }
  for (std::size_t d : input_shape_) {
    if (d == 0) throw std::invalid_argument("input dimensions must be positive");
  }
  if (num_classes_ < 2) throw std::invalid_argument("num_classes must be >= 2");
}

int ClassifierModel::add_parameter(std::string name, Shape shape, std::size_t fan_in, bool zero) {
  Tensor t(std::move(shape));
  if (!zero) {
    Rng rng(derive_seed(seed_, init_draws_));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
  }
  ++init_draws_;
  params_.push_back({std::move(name), std::move(t)});
  return static_cast<int>(params_.size() - 1);
}

ClassifierModel& ClassifierModel::add_conv(const std::string& name, std::size_t in,
                                           std::size_t out, std::size_t kh, std::size_t kw,
                                           kernels::ConvGeometry padding, bool with_bias) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  if (in == 0 || out == 0 || kh == 0 || kw == 0) {
    throw std::invalid_argument("conv dimensions must be positive");
  }
  Layer l;
  l.kind = LayerKind::Conv;
  l.name = name;
  l.in = in;
  l.out = out;
  l.kh = kh;
  l.kw = kw;
  l.padding = padding;
  l.weight = add_parameter(name + ".weight", {out, in, kh, kw}, in * kh * kw, false);
  if (with_bias) l.bias = add_parameter(name + ".bias", {out}, 1, true);
  layers_.push_back(l);
  return *this;
}

ClassifierModel& ClassifierModel::add_relu(const std::string& name) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  layers_.push_back({.kind = LayerKind::ReLU, .name = name});
  return *this;
}

ClassifierModel& ClassifierModel::add_max_pool(const std::string& name, std::size_t kh,
                                               std::size_t kw) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  Layer l{.kind = LayerKind::MaxPool, .name = name};
  l.pool_h = kh;
  l.pool_w = kw;
  layers_.push_back(l);
  return *this;
}

ClassifierModel& ClassifierModel::add_global_max_pool(const std::string& name) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  layers_.push_back({.kind = LayerKind::GlobalMaxPool, .name = name});
  return *this;
}

ClassifierModel& ClassifierModel::add_flatten(const std::string& name) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  layers_.push_back({.kind = LayerKind::Flatten, .name = name});
  return *this;
}

ClassifierModel& ClassifierModel::add_linear(const std::string& name, std::size_t in,
                                             std::size_t out, bool with_bias) {
  if (has_layer(name)) throw std::invalid_argument("duplicate layer name '" + name + "'");
  if (in == 0 || out == 0) throw std::invalid_argument("linear dimensions must be positive");
  Layer l{.kind = LayerKind::Linear, .name = name, .in = in, .out = out};
  l.weight = add_parameter(name + ".weight", {out, in}, in, false);
  if (with_bias) l.bias = add_parameter(name + ".bias", {out}, 1, true);
  layers_.push_back(l);
  return *this;
}

std::vector<std::string> ClassifierModel::layer_names() const {
  std::vector<std::string> names;
  for (const Layer& l : layers_) names.push_back(l.name);
  return names;
}

bool ClassifierModel::has_layer(std::string_view name) const {
  for (const Layer& l : layers_) {
    if (l.name == name) return true;
  }
  return false;
}

std::size_t ClassifierModel::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  throw std::out_of_range("layer '" + std::string(name) + "' not in model");
}

std::size_t ClassifierModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

Parameter& ClassifierModel::parameter(std::string_view name) {
  for (Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("parameter '" + std::string(name) + "' not in model");
}

const Parameter& ClassifierModel::parameter(std::string_view name) const {
  return const_cast<ClassifierModel*>(this)->parameter(name);
}

std::vector<ad::Var> ClassifierModel::bind(bool trainable) const {
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const Parameter& p : params_) vars.emplace_back(p.value, trainable);
  return vars;
}

ad::Var ClassifierModel::run(const ad::Var& x, std::span<const ad::Var> params, std::size_t begin,
                             std::size_t end) const {
  if (end > layers_.size() || begin > end) throw std::out_of_range("layer range");
  if (params.size() != params_.size()) throw std::invalid_argument("parameter binding mismatch");
  ad::Var h = x;
  for (std::size_t i = begin; i < end; ++i) {
    const Layer& l = layers_[i];
    switch (l.kind) {
      case LayerKind::Conv:
        h = ad::conv2d(h, params[static_cast<std::size_t>(l.weight)], l.padding);
        if (l.bias >= 0) h = ad::add_channel_bias(h, params[static_cast<std::size_t>(l.bias)]);
        break;
      case LayerKind::ReLU:
        h = ad::relu(h);
        break;
      case LayerKind::MaxPool:
        h = ad::max_pool(h, l.pool_h, l.pool_w);
        break;
      case LayerKind::GlobalMaxPool:
        if (h.value().rank() != 4) throw std::invalid_argument("global max-pool needs rank 4");
        h = ad::max_pool(h, h.shape()[2], h.shape()[3]);
        break;
      case LayerKind::Flatten: {
        const std::size_t n = h.shape()[0];
        h = ad::reshape(h, {n, h.value().size() / n});
        break;
      }
      case LayerKind::Linear:
        if (h.value().rank() != 2 || h.shape()[1] != l.in) {
          throw std::invalid_argument("linear '" + l.name + "' expects [N," +
                                      std::to_string(l.in) + "], got " + shape_string(h.shape()));
        }
        h = ad::matmul(h, ad::transpose(params[static_cast<std::size_t>(l.weight)]));
        if (l.bias >= 0) h = ad::add_channel_bias(h, params[static_cast<std::size_t>(l.bias)]);
        break;
    }
  }
  return h;
}

void ClassifierModel::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != input_shape_[0] || x.dim(2) != input_shape_[1] ||
      x.dim(3) != input_shape_[2]) {
    throw std::invalid_argument("input " + shape_string(x.shape()) + " does not match model input " +
                                shape_string(input_shape_));
  }
}

Tensor ClassifierModel::logits(const Tensor& x) const {
  check_input(x);
  ad::NoGradGuard guard;
  auto params = bind(false);
  return forward(ad::Var(x), params).value();
}

std::vector<std::size_t> ClassifierModel::predict(const Tensor& x) const {
  Tensor z = logits(x);
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[i * k + j] > z[i * k + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

Tensor ClassifierModel::activations(const Tensor& x, std::string_view layer) const {
  check_input(x);
  ad::NoGradGuard guard;
  auto params = bind(false);
  return run(ad::Var(x), params, 0, layer_index(layer) + 1).value();
}

Shape ClassifierModel::output_shape(std::size_t index) const {
  Shape s = input_shape_;
  if (index == static_cast<std::size_t>(-1)) return s;
  for (std::size_t i = 0; i <= index && i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    switch (l.kind) {
      case LayerKind::Conv:
        s = {l.out, s[1] + 2 * l.padding.pad_h - l.kh + 1, s[2] + 2 * l.padding.pad_w - l.kw + 1};
        break;
      case LayerKind::ReLU: break;
      case LayerKind::MaxPool: s = {s[0], s[1] / l.pool_h, s[2] / l.pool_w}; break;
      case LayerKind::GlobalMaxPool: s = {s[0], 1, 1}; break;
      case LayerKind::Flatten: s = {shape_size(s)}; break;
      case LayerKind::Linear: s = {l.out}; break;
    }
  }
  return s;
}

ClassifierModel build_model(Architecture arch, std::size_t num_classes, Shape input_shape,
                            std::uint64_t seed) {
  ClassifierModel m(arch, std::move(input_shape), num_classes, seed);
  const std::size_t in_ch = m.input_shape()[0];
  switch (arch) {
    case Architecture::ImageCnnSmall: {
      const std::size_t widths[] = {8, 16, 32, 32};
      std::size_t c = in_ch;
      std::size_t h = m.input_shape()[1], w = m.input_shape()[2];
      for (std::size_t b = 0; b < 4; ++b) {
        if (h < 2 || w < 2) throw std::invalid_argument("input too small for image-cnn-small");
        const std::string id = std::to_string(b + 1);
        m.add_conv("conv" + id, c, widths[b], 3, 3, {1, 1});
        m.add_relu("relu" + id);
        m.add_max_pool("pool" + id, 2, 2);
        c = widths[b];
        h /= 2;
        w /= 2;
      }
      m.add_global_max_pool("gmp").add_flatten("flatten").add_linear("fc", c, num_classes);
      break;
    }
    case Architecture::SignalCnnSmall: {
      if (m.input_shape()[1] != 1) throw std::invalid_argument("signal input must be {C,T}");
      const std::size_t widths[] = {16, 32, 32};
      std::size_t c = in_ch;
      std::size_t t = m.input_shape()[2];
      for (std::size_t b = 0; b < 3; ++b) {
        if (t < 4) throw std::invalid_argument("input too short for signal-cnn-small");
        const std::string id = std::to_string(b + 1);
        m.add_conv("conv" + id, c, widths[b], 1, 7, {0, 3});
        m.add_relu("relu" + id);
        m.add_max_pool("pool" + id, 1, 4);
        c = widths[b];
        t /= 4;
      }
      m.add_global_max_pool("gmp").add_flatten("flatten").add_linear("fc", c, num_classes);
      break;
    }
    case Architecture::Custom:
      throw std::invalid_argument("custom architectures are assembled with the builder API");
  }
  return m;
}

LayerSplit::LayerSplit(const ClassifierModel& model, std::string_view layer)
    : model_(&model), layer_(layer), index_(model.layer_index(layer)) {}

Tensor LayerSplit::features(const Tensor& x) const {
  model_->check_input(x);
  ad::NoGradGuard guard;
  auto params = model_->bind(false);
  return features(ad::Var(x), params).value();
}

Tensor LayerSplit::head(const Tensor& a) const {
  ad::NoGradGuard guard;
  auto params = model_->bind(false);
  return head(ad::Var(a), params).value();
}

ad::Var LayerSplit::features(const ad::Var& x, std::span<const ad::Var> params) const {
  return model_->run(x, params, 0, index_ + 1);
}

ad::Var LayerSplit::head(const ad::Var& a, std::span<const ad::Var> params) const {
  return model_->run(a, params, index_ + 1, model_->layers().size());
}

namespace {

void check_class(const ClassifierModel& m, std::size_t c) {
  if (c >= m.num_classes()) {
    throw std::out_of_range("class index " + std::to_string(c) + " >= " +
                            std::to_string(m.num_classes()));
  }
}

Tensor gradient_of_logit(const ClassifierModel& m, const ad::Var& from, std::size_t begin,
                         std::size_t target) {
  auto params = m.bind(false);
  ad::Var z = m.run(from, params, begin, m.layers().size());
  std::vector<std::size_t> cols(z.shape()[0], target);
  ad::Var s = ad::sum(ad::pick(z, cols));
  return ad::grad(s, {from})[0].value();
}

}  // namespace

Tensor latent_gradient(const LayerSplit& split, const Tensor& x, std::size_t target_class) {
  check_class(split.model(), target_class);
  return head_gradient(split, split.features(x), target_class);
}

Tensor head_gradient(const LayerSplit& split, const Tensor& activations, std::size_t target_class) {
  check_class(split.model(), target_class);
  ad::Var a(activations, true);
  return gradient_of_logit(split.model(), a, split.index() + 1, target_class);
}

Tensor input_gradient(const ClassifierModel& model, const Tensor& x, std::size_t target_class) {
  check_class(model, target_class);
  model.check_input(x);
  ad::Var v(x, true);
  return gradient_of_logit(model, v, 0, target_class);
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::Max: return "max";
    case Pooling::Mean: return "mean";
    case Pooling::Sum: return "sum";
  }
  return "max";
}

Pooling parse_pooling(std::string_view id) {
  if (id == "max") return Pooling::Max;
  if (id == "mean") return Pooling::Mean;
  if (id == "sum") return Pooling::Sum;
  throw std::invalid_argument("unknown pooling '" + std::string(id) + "'");
}

Tensor pool_spatial(const Tensor& x, Pooling p) {
  if (x.rank() < 2) throw std::invalid_argument("pool_spatial needs [N, C, ...]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const double* v = x.data() + i * inner;
    double acc = p == Pooling::Max ? v[0] : 0.0;
    for (std::size_t j = 0; j < inner; ++j) {
      if (p == Pooling::Max) {
        acc = std::max(acc, v[j]);
      } else {
        acc += v[j];
      }
    }
    out[i] = p == Pooling::Mean ? acc / static_cast<double>(inner) : acc;
  }
  return out;
}

namespace {

json layer_json(const Layer& l, const ClassifierModel& m) {
  json j = {{"name", l.name}, {"kind", to_string(l.kind)}};
  switch (l.kind) {
    case LayerKind::Conv:
      j["in"] = l.in;
      j["out"] = l.out;
      j["kernel"] = {l.kh, l.kw};
      j["padding"] = {l.padding.pad_h, l.padding.pad_w};
      j["bias"] = l.bias >= 0;
      break;
    case LayerKind::Linear:
      j["in"] = l.in;
      j["out"] = l.out;
      j["bias"] = l.bias >= 0;
      break;
    case LayerKind::MaxPool:
      j["window"] = {l.pool_h, l.pool_w};
      break;
    default: break;
  }
  (void)m;
  return j;
}

std::string param_file(const std::string& name) { return "params/" + name + ".f32"; }

void write_f32(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<unsigned char> bytes(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void read_f32(const std::filesystem::path& path, Tensor& t) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<unsigned char> bytes(t.size() * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()) || in.peek() != EOF) {
    throw std::runtime_error(path.string() + ": size does not match parameter shape " +
                             shape_string(t.shape()));
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    t[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
}

}  // namespace

void save_checkpoint(const ClassifierModel& model, const std::filesystem::path& dir,
                     const json& provenance) {
  std::filesystem::create_directories(dir / "params");
  json manifest = {{"format", "shortcut-checkpoint/1"},
                   {"architecture", to_string(model.architecture())},
                   {"num_classes", model.num_classes()},
                   {"input_shape", model.input_shape()},
                   {"seed", model.seed()},
                   {"layers", json::array()},
                   {"parameters", json::array()},
                   {"provenance", provenance}};
  for (const Layer& l : model.layers()) manifest["layers"].push_back(layer_json(l, model));
  for (const Parameter& p : model.parameters()) {
    manifest["parameters"].push_back(
        {{"name", p.name}, {"shape", p.value.shape()}, {"file", param_file(p.name)}});
    write_f32(dir / param_file(p.name), p.value);
  }
  std::ofstream out(dir / "model.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "model.json").string());
  out << manifest.dump(2) << '\n';
}

namespace {

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  return json::parse(in);
}

}  // namespace

ClassifierModel load_checkpoint(const std::filesystem::path& dir) {
  const json manifest = read_manifest(dir);
  ClassifierModel m(parse_architecture(manifest.at("architecture").get<std::string>()),
                    manifest.at("input_shape").get<Shape>(),
                    manifest.at("num_classes").get<std::size_t>(),
                    manifest.at("seed").get<std::uint64_t>());
  for (const json& l : manifest.at("layers")) {
    const std::string name = l.at("name");
    switch (parse_layer_kind(l.at("kind").get<std::string>())) {
      case LayerKind::Conv: {
        auto k = l.at("kernel").get<std::vector<std::size_t>>();
        auto p = l.at("padding").get<std::vector<std::size_t>>();
        m.add_conv(name, l.at("in"), l.at("out"), k.at(0), k.at(1), {p.at(0), p.at(1)},
                   l.at("bias").get<bool>());
        break;
      }
      case LayerKind::Linear:
        m.add_linear(name, l.at("in"), l.at("out"), l.at("bias").get<bool>());
        break;
      case LayerKind::ReLU: m.add_relu(name); break;
      case LayerKind::MaxPool: {
        auto w = l.at("window").get<std::vector<std::size_t>>();
        m.add_max_pool(name, w.at(0), w.at(1));
        break;
      }
      case LayerKind::GlobalMaxPool: m.add_global_max_pool(name); break;
      case LayerKind::Flatten: m.add_flatten(name); break;
    }
  }
  for (const json& p : manifest.at("parameters")) {
    Parameter& param = m.parameter(p.at("name").get<std::string>());
    if (p.at("shape").get<Shape>() != param.value.shape()) {
      throw std::runtime_error("parameter " + param.name + " shape mismatch in manifest");
    }
    read_f32(dir / p.at("file").get<std::string>(), param.value);
  }
  return m;
}

json load_checkpoint_provenance(const std::filesystem::path& dir) {
  return read_manifest(dir).value("provenance", json::object());
}

}  // namespace shortcut
