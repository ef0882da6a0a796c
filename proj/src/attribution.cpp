#include "shortcut/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "shortcut/io.hpp"
#include "shortcut/kernels.hpp"

namespace shortcut {

std::string to_string(AttributionRule r) { return r == AttributionRule::Lrp ? "lrp" : "gradient"; }

AttributionRule parse_attribution_rule(std::string_view id) {
  if (id == "lrp" || id == "lrp-composite") return AttributionRule::Lrp;
  if (id == "gradient" || id == "input-gradient") return AttributionRule::Gradient;
  throw std::invalid_argument("unknown attribution rule '" + std::string(id) + "'");
}

std::string to_string(ReferenceMode m) {
  return m == ReferenceMode::Activation ? "activation" : "relevance";
}

ReferenceMode parse_reference_mode(std::string_view id) {
  if (id == "activation" || id == "amax") return ReferenceMode::Activation;
  if (id == "relevance" || id == "rmax") return ReferenceMode::Relevance;
  throw std::invalid_argument("unknown reference mode '" + std::string(id) + "'");
}

const Tensor& Attribution::at(std::string_view layer) const {
  if (layer == "input") return input;
  auto it = layers.find(std::string(layer));
  if (it == layers.end()) throw std::out_of_range("no relevance stored for '" + std::string(layer) + "'");
  return it->second;
}

namespace {

// Inputs and pooling indices of every layer for one batch.
struct ForwardCache {
  std::vector<Tensor> inputs;  // inputs[i] enters layer i; inputs[L] = logits
  std::vector<kernels::PoolIndex> argmax;
};

void add_bias(Tensor& y, const Tensor& b) {
  const std::size_t n = y.dim(0), c = y.dim(1), inner = y.size() / (n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < inner; ++j) y[(i * c + k) * inner + j] += b[k];
}

// y = x W^T for x [N, in], W [out, in].
Tensor dense(const Tensor& x, const Tensor& w) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({n, out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < in; ++j) acc += x[i * in + j] * w[o * in + j];
      y[i * out + o] = acc;
    }
  return y;
}

// g W for g [N, out]: [N, in].
Tensor dense_t(const Tensor& g, const Tensor& w) {
  const std::size_t n = g.dim(0), out = w.dim(0), in = w.dim(1);
  Tensor x({n, in});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      const double v = g[i * out + o];
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < in; ++j) x[i * in + j] += v * w[o * in + j];
    }
  return x;
}

ForwardCache run_forward(const ClassifierModel& m, const Tensor& x) {
  m.check_input(x);
  ForwardCache cache;
  cache.inputs.push_back(x);
  cache.argmax.resize(m.layers().size());
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const Layer& l = m.layers()[i];
    const Tensor& h = cache.inputs.back();
    Tensor y;
    switch (l.kind) {
      case LayerKind::Conv:
        y = kernels::conv2d(h, m.parameters()[static_cast<std::size_t>(l.weight)].value, l.padding);
        if (l.bias >= 0) add_bias(y, m.parameters()[static_cast<std::size_t>(l.bias)].value);
        break;
      case LayerKind::ReLU:
        y = h;
        for (double& v : y.values()) v = std::max(v, 0.0);
        break;
      case LayerKind::MaxPool:
      case LayerKind::GlobalMaxPool: {
        const bool global = l.kind == LayerKind::GlobalMaxPool;
        auto r = kernels::max_pool(h, global ? h.dim(2) : l.pool_h, global ? h.dim(3) : l.pool_w);
        y = std::move(r.output);
        cache.argmax[i] = r.argmax;
        break;
      }
      case LayerKind::Flatten:
        y = h.reshaped({h.dim(0), h.size() / h.dim(0)});
        break;
      case LayerKind::Linear:
        y = dense(h, m.parameters()[static_cast<std::size_t>(l.weight)].value);
        if (l.bias >= 0) add_bias(y, m.parameters()[static_cast<std::size_t>(l.bias)].value);
        break;
    }
    cache.inputs.push_back(std::move(y));
  }
  return cache;
}

// Relevance at the input of layer i given relevance at its output.
Tensor lrp_layer(const ClassifierModel& m, const ForwardCache& cache, std::size_t i,
                 const Tensor& r_out, const RuleConfig& cfg) {
  const Layer& l = m.layers()[i];
  const Tensor& a = cache.inputs[i];
  switch (l.kind) {
    case LayerKind::ReLU: return r_out;
    case LayerKind::Flatten: return r_out.reshaped(a.shape());
    case LayerKind::MaxPool:
    case LayerKind::GlobalMaxPool: return kernels::scatter(r_out, *cache.argmax[i], a.shape());
    case LayerKind::Linear: {
      const Tensor& w = m.parameters()[static_cast<std::size_t>(l.weight)].value;
      Tensor z = cache.inputs[i + 1];
      Tensor s(z.shape());
      for (std::size_t j = 0; j < z.size(); ++j) {
        const double d = z[j] + cfg.epsilon * (z[j] >= 0.0 ? 1.0 : -1.0);
        s[j] = r_out[j] / d;
      }
      Tensor c = dense_t(s, w);
      for (std::size_t j = 0; j < c.size(); ++j) c[j] *= a[j];
      return c;
    }
    case LayerKind::Conv: {
      const Tensor& w = m.parameters()[static_cast<std::size_t>(l.weight)].value;
      if (i == 0 && cfg.flat_first_conv) {
        // Flat rule: every connection weighs 1, so relevance spreads evenly
        // over the receptive field (padding excluded).
        Tensor ones_w(w.shape(), 1.0);
        Tensor count = kernels::conv2d(Tensor(a.shape(), 1.0), ones_w, l.padding);
        Tensor s(r_out.shape());
        for (std::size_t j = 0; j < s.size(); ++j) s[j] = r_out[j] / count[j];
        return kernels::conv2d_input_grad(s, ones_w, a.shape(), l.padding);
      }
      Tensor wp = w;
      for (double& v : wp.values()) v = std::max(v, 0.0);
      Tensor z = kernels::conv2d(a, wp, l.padding);
      Tensor s(z.shape());
      for (std::size_t j = 0; j < z.size(); ++j) {
        s[j] = std::abs(z[j]) > 1e-300 ? r_out[j] / z[j] : 0.0;
      }
      Tensor c = kernels::conv2d_input_grad(s, wp, a.shape(), l.padding);
      for (std::size_t j = 0; j < c.size(); ++j) c[j] *= a[j];
      return c;
    }
  }
  return r_out;
}

std::size_t stop_index(const ClassifierModel& m, const RuleConfig& cfg) {
  if (!cfg.stop_layer) return 0;
  return m.layer_index(*cfg.stop_layer);
}

Attribution lrp_from(const ClassifierModel& m, const ForwardCache& cache, std::size_t layer,
                     Tensor relevance, const RuleConfig& cfg) {
  Attribution out;
  out.logits = cache.inputs.back();
  const std::size_t stop = stop_index(m, cfg);
  out.layers[m.layers()[layer].name] = relevance;
  for (std::size_t i = layer + 1; i-- > 0;) {
    if (cfg.stop_layer && i <= stop) return out;
    relevance = lrp_layer(m, cache, i, relevance, cfg);
    if (i > 0) out.layers[m.layers()[i - 1].name] = relevance;
  }
  out.input = std::move(relevance);
  return out;
}

Attribution gradient_from(const ClassifierModel& m, const Tensor& x, std::size_t layer,
                          const Tensor& seed, const RuleConfig& cfg) {
  m.check_input(x);
  auto params = m.bind(false);
  ad::Var xv(x, true);
  std::vector<ad::Var> outs;
  ad::Var h = xv;
  for (std::size_t i = 0; i <= layer; ++i) {
    h = m.run(h, params, i, i + 1);
    outs.push_back(h);
  }
  ad::Var logits = m.run(h, params, layer + 1, m.layers().size());
  std::vector<ad::Var> wrt = outs;
  wrt.push_back(xv);
  auto g = ad::grad(ad::sum(ad::mul_const(outs.back(), seed)), wrt);
  Attribution out;
  out.logits = logits.value();
  const std::size_t stop = stop_index(m, cfg);
  for (std::size_t i = 0; i <= layer; ++i) {
    if (!cfg.stop_layer || i >= stop) out.layers[m.layers()[i].name] = g[i].value();
  }
  if (!cfg.stop_layer) out.input = g.back().value();
  return out;
}

}  // namespace

Attribution propagate_from(const ClassifierModel& model, const Tensor& x, std::string_view layer,
                           const Tensor& relevance, const RuleConfig& config) {
  const std::size_t index = model.layer_index(layer);
  Shape expected = model.output_shape(index);
  expected.insert(expected.begin(), x.dim(0));
  if (relevance.shape() != expected) {
    throw std::invalid_argument("relevance shape " + shape_string(relevance.shape()) +
                                " does not match layer output " + shape_string(expected));
  }
  if (config.stop_layer && model.layer_index(*config.stop_layer) > index) {
    throw std::invalid_argument("stop layer lies above the start layer");
  }
  if (config.rule == AttributionRule::Gradient) {
    return gradient_from(model, x, index, relevance, config);
  }
  return lrp_from(model, run_forward(model, x), index, relevance, config);
}

Attribution attribute(const ClassifierModel& model, const Tensor& x,
                      const std::vector<std::size_t>& targets, const RuleConfig& config) {
  model.check_input(x);
  const std::size_t n = x.dim(0), k = model.num_classes();
  if (targets.size() != n && targets.size() != 1) {
    throw std::invalid_argument("need one target per sample or a single target");
  }
  std::vector<std::size_t> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = targets.size() == 1 ? targets[0] : targets[i];
    if (t[i] >= k) throw std::out_of_range("target class " + std::to_string(t[i]) + " >= " + std::to_string(k));
  }
  const std::size_t last = model.layers().size() - 1;
  Attribution out;
  if (config.rule == AttributionRule::Gradient) {
    Tensor seed({n, k});
    for (std::size_t i = 0; i < n; ++i) seed[i * k + t[i]] = 1.0;
    out = gradient_from(model, x, last, seed, config);
  } else {
    ForwardCache cache = run_forward(model, x);
    const Tensor& z = cache.inputs.back();
    Tensor r({n, k});
    for (std::size_t i = 0; i < n; ++i) r[i * k + t[i]] = z[i * k + t[i]];
    out = lrp_from(model, cache, last, std::move(r), config);
  }
  out.targets = std::move(t);
  return out;
}

Attribution attribute(const ClassifierModel& model, const Tensor& x, std::size_t target,
                      const RuleConfig& config) {
  return attribute(model, x, std::vector<std::size_t>{target}, config);
}

Attribution concept_heatmap(const LayerSplit& split, const Tensor& x,
                            const std::vector<double>& cav, const RuleConfig& config) {
  const std::size_t channels = split.channels();
  if (cav.size() != channels) {
    throw std::invalid_argument("CAV has " + std::to_string(cav.size()) + " entries, layer '" +
                                split.layer() + "' has " + std::to_string(channels) + " channels");
  }
  Tensor a = split.features(x);
  const std::size_t inner = a.size() / (a.dim(0) * channels);
  for (std::size_t n = 0; n < a.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t j = 0; j < inner; ++j) a[(n * channels + c) * inner + j] *= cav[c];
  return propagate_from(split.model(), x, split.layer(), a, config);
}

Tensor channel_summed(const Tensor& heatmap) {
  if (heatmap.rank() != 4) throw std::invalid_argument("channel_summed expects [N, C, H, W]");
  const std::size_t n = heatmap.dim(0), c = heatmap.dim(1), hw = heatmap.dim(2) * heatmap.dim(3);
  Tensor out({n, heatmap.dim(2), heatmap.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += heatmap[(i * c + k) * hw + j];
  return out;
}

Tensor channel_scores(const ClassifierModel& model, std::string_view layer, const Tensor& inputs,
                      ReferenceMode mode) {
  const std::size_t index = model.layer_index(layer);
  const std::size_t c = model.output_shape(index).at(0);
  const std::size_t n = inputs.dim(0);
  Tensor scores({n, c});
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor x = inputs.slice(start, count);
    Tensor s;
    if (mode == ReferenceMode::Activation) {
      s = pool_spatial(model.activations(x, layer), Pooling::Max);
    } else {
      RuleConfig cfg;
      cfg.stop_layer = std::string(layer);
      auto pred = model.predict(x);
      s = pool_spatial(attribute(model, x, pred, cfg).at(layer), Pooling::Sum);
    }
    std::copy_n(s.data(), count * c, scores.data() + start * c);
  }
  return scores;
}

std::vector<std::size_t> reference_samples(const ClassifierModel& model, std::string_view layer,
                                           std::size_t channel, const Tensor& inputs,
                                           ReferenceMode mode, std::size_t k) {
  const std::size_t n = inputs.dim(0);
  const std::size_t c = model.output_shape(model.layer_index(layer)).at(0);
  if (channel >= c) {
    throw std::out_of_range("channel " + std::to_string(channel) + " >= " + std::to_string(c));
  }
  if (k > n) throw std::invalid_argument("k exceeds dataset size");
  Tensor scores = channel_scores(model, layer, inputs, mode);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a * c + channel] > scores[b * c + channel];
  });
  order.resize(k);
  return order;
}

void write_heatmap_png(const std::filesystem::path& path, const Tensor& heatmap) {
  if (heatmap.rank() != 2) throw std::invalid_argument("heatmap must be [H, W]");
  const std::size_t h = heatmap.dim(0), w = heatmap.dim(1);
  double scale = 0.0;
  for (double v : heatmap.values()) scale = std::max(scale, std::abs(v));
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = scale > 0.0 ? heatmap[i] / scale : 0.0;
    // Positive fades white -> red, negative white -> blue.
    const double fade = 1.0 - std::abs(t);
    const auto vivid = static_cast<std::uint8_t>(255);
    const auto pale = static_cast<std::uint8_t>(std::lround(255.0 * fade));
    rgb[3 * i + 0] = t >= 0.0 ? vivid : pale;
    rgb[3 * i + 1] = pale;
    rgb[3 * i + 2] = t >= 0.0 ? pale : vivid;
  }
  io::write_png_rgb(path, h, w, rgb);
}

void write_heatmap_csv(const std::filesystem::path& path, const Tensor& heatmap) {
  if (heatmap.rank() != 2) throw std::invalid_argument("heatmap must be [H, W]");
  io::write_csv(path, heatmap);
}

}  // namespace shortcut
