#include "shortcut/mitigation.hpp"
#include <cstdlib>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shortcut/attribution.hpp"
#include "shortcut/retrieval.hpp"

namespace shortcut {

using nlohmann::json;

std::string to_string(MitigationMethod m) {
  switch (m) {
    case MitigationMethod::Vanilla: return "vanilla";
    case MitigationMethod::Rrr: return "rrr";
    case MitigationMethod::RrClarc: return "rrclarc";
    case MitigationMethod::PClarc: return "pclarc";
    case MitigationMethod::RpClarc: return "rpclarc";
  }
  return "vanilla";
}

MitigationMethod parse_mitigation_method(std::string_view id) {
  if (id == "vanilla") return MitigationMethod::Vanilla;
  if (id == "rrr") return MitigationMethod::Rrr;
  if (id == "rrclarc") return MitigationMethod::RrClarc;
  if (id == "pclarc") return MitigationMethod::PClarc;
  if (id == "rpclarc") return MitigationMethod::RpClarc;
  throw std::invalid_argument("unknown mitigation method '" + std::string(id) + "'");
}

bool is_projection(MitigationMethod m) {
  return m == MitigationMethod::PClarc || m == MitigationMethod::RpClarc;
}

std::string to_string(MaskSource s) {
  switch (s) {
    case MaskSource::GroundTruth: return "ground-truth";
    case MaskSource::Heatmap: return "heatmap";
    case MaskSource::Binarized: return "binarized";
  }
  return "ground-truth";
}

MaskSource parse_mask_source(std::string_view id) {
  if (id == "ground-truth") return MaskSource::GroundTruth;
  if (id == "heatmap") return MaskSource::Heatmap;
  if (id == "binarized") return MaskSource::Binarized;
  throw std::invalid_argument("unknown mask source '" + std::string(id) + "'");
}

ad::Var rrr_loss(const ClassifierModel& model, std::span<const ad::Var> params, const Tensor& inputs,
                 const Tensor& masks) {
  if (masks.shape() != inputs.shape()) {
    throw std::invalid_argument("mask shape " + shape_string(masks.shape()) + " does not match inputs " +
                                shape_string(inputs.shape()));
  }
  ad::EnableGradGuard enable;
  ad::Var x(inputs, true);
  ad::Var total = ad::sum(ad::log_softmax(model.forward(x, params)));
  ad::Var g = ad::grad(total, {x}, true)[0];
  ad::Var masked = ad::mul_const(g, masks);
  return ad::sum(ad::mul(masked, masked));
}

namespace {

Tensor broadcast_direction(const std::vector<double>& h, const Shape& shape) {
  if (shape.size() != 4 || shape[1] != h.size()) {
    throw std::invalid_argument("CAV has " + std::to_string(h.size()) + " channels, activations are " +
                                shape_string(shape));
  }
  return kernels::channel_broadcast(Tensor({h.size()}, h), shape);
}

std::vector<double> unit_of(const std::vector<double>& h) {
  double norm = 0.0;
  for (double v : h) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw std::invalid_argument("zero concept direction");
  std::vector<double> u(h);
  for (double& v : u) v /= norm;
  return u;
}

}  // namespace

std::string to_string(LatentOutput o) { return o == LatentOutput::Logit ? "logit" : "margin"; }

LatentOutput parse_latent_output(std::string_view id) {
  if (id == "logit") return LatentOutput::Logit;
  if (id == "margin") return LatentOutput::Margin;
  throw std::invalid_argument("unknown latent output: " + std::string(id));
}

ad::Var rrclarc_loss(const ClassifierModel& model, std::span<const ad::Var> params, std::size_t layer_index,
                     const Tensor& inputs, const std::vector<double>& h, std::size_t target_class,
                     LatentOutput output) {
  if (layer_index + 1 >= model.layers().size()) throw std::invalid_argument("split layer has no head");
  if (target_class >= model.num_classes()) throw std::out_of_range("target class out of range");
  ad::EnableGradGuard enable;
  ad::Var a = model.run(ad::Var(inputs), params, 0, layer_index + 1);
  if (!a.requires_grad()) a = ad::Var(a.value(), true);  // no parameter below the split
  ad::Var z = model.run(a, params, layer_index + 1, model.layers().size());
  const std::size_t n = inputs.dim(0);
  ad::Var picked = ad::sum(ad::pick(z, std::vector<std::size_t>(n, target_class)));
  const std::size_t k = model.num_classes();
  if (output == LatentOutput::Margin && k > 1) {
    for (std::size_t j = 0; j < k; ++j) {
      if (j == target_class) continue;
      ad::Var other = ad::sum(ad::pick(z, std::vector<std::size_t>(n, j)));
      picked = ad::sub(picked, ad::scale(other, 1.0 / static_cast<double>(k - 1)));
    }
  }
  ad::Var g = ad::grad(picked, {a}, true)[0];
  ad::Var aligned = ad::mul_const(g, broadcast_direction(h, a.shape()));
  ad::Var per_sample = ad::rowsum(ad::reshape(aligned, {n, aligned.value().size() / n}));
  return ad::scale(ad::sum(ad::mul(per_sample, per_sample)), 1.0 / static_cast<double>(n));
}

namespace {

// Per-location projections h . a_loc, [N, L].
std::vector<double> location_projections(const Tensor& a, const std::vector<double>& h) {
  const std::size_t n = a.dim(0), c = a.dim(1), l = a.size() / (n * c);
  std::vector<double> out(n * l, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t p = 0; p < l; ++p) out[i * l + p] += h[k] * a[(i * c + k) * l + p];
  return out;
}

std::vector<double> pooled_projections(const Tensor& a, const std::vector<double>& h) {
  Tensor pooled = pool_spatial(a, Pooling::Max);
  const std::size_t n = pooled.dim(0), c = pooled.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) out[i] += h[k] * pooled[i * c + k];
  return out;
}

}  // namespace

CleanStats clean_statistics(const LayerSplit& split, const Tensor& clean_inputs, const std::vector<double>& h,
                            bool per_location) {
  if (clean_inputs.rank() != 4 || clean_inputs.dim(0) == 0) {
    throw std::invalid_argument("clean statistics need at least one clean sample");
  }
  const auto u = unit_of(h);
  CleanStats s;
  s.per_location = per_location;
  s.samples = clean_inputs.dim(0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < clean_inputs.dim(0); start += 64) {
    const std::size_t m = std::min<std::size_t>(64, clean_inputs.dim(0) - start);
    Tensor a = split.features(clean_inputs.slice(start, m));
    auto p = per_location ? location_projections(a, u) : pooled_projections(a, u);
    for (double v : p) total += v;
    count += p.size();
  }
  s.mean = total / static_cast<double>(count);
  return s;
}

Tensor pclarc_apply(const Tensor& activations, const std::vector<double>& h, const CleanStats& stats) {
  broadcast_direction(h, activations.shape());
  const auto u = unit_of(h);
  const std::size_t n = activations.dim(0), c = activations.dim(1), l = activations.size() / (n * c);
  Tensor out = activations;
  if (stats.per_location) {
    auto p = location_projections(activations, u);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t q = 0; q < l; ++q) out[(i * c + k) * l + q] -= (p[i * l + q] - stats.mean) * u[k];
  } else {
    auto p = pooled_projections(activations, u);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t q = 0; q < l; ++q) out[(i * c + k) * l + q] -= (p[i] - stats.mean) * u[k];
  }
  return out;
}

EditedModel::EditedModel(ClassifierModel model, const ConceptVector& cav, CleanStats stats,
                         std::optional<double> gate)
    : model_(std::move(model)), cav_(cav), stats_(stats), gate_(gate) {
  if (!model_.has_layer(cav.layer)) throw std::invalid_argument("model has no layer '" + cav.layer + "'");
  if (cav.degenerate) throw std::invalid_argument("cannot project along a degenerate CAV");
}

std::vector<bool> EditedModel::projected(const Tensor& x) const {
  const std::size_t n = x.dim(0);
  if (!cav_) return std::vector<bool>(n, false);
  if (!gate_) return std::vector<bool>(n, true);
  auto scores = project(latent_features(model_, cav_->layer, x), *cav_);
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = scores[i] > *gate_;
  return out;
}

Tensor EditedModel::logits(const Tensor& x) const {
  if (!cav_) return batched_logits(model_, x);
  LayerSplit split(model_, cav_->layer);
  const std::size_t n = x.dim(0), k = model_.num_classes();
  Tensor out({n, k});
  for (std::size_t start = 0; start < n; start += 64) {
    const std::size_t m = std::min<std::size_t>(64, n - start);
    Tensor chunk = x.slice(start, m);
    Tensor a = split.features(chunk);
    std::vector<bool> gate = projected(chunk);
    if (std::any_of(gate.begin(), gate.end(), [](bool g) { return g; })) {
      Tensor edited = pclarc_apply(a, cav_->unit, stats_);
      const std::size_t row = a.size() / m;
      for (std::size_t i = 0; i < m; ++i) {
        if (gate[i]) std::copy_n(edited.data() + i * row, row, a.data() + i * row);
      }
    }
    Tensor z = split.head(a);
    std::copy_n(z.data(), m * k, out.data() + start * k);
  }
  return out;
}

std::vector<std::size_t> EditedModel::predict(const Tensor& x) const {
  Tensor z = logits(x);
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<std::size_t>(std::max_element(z.data() + i * k, z.data() + (i + 1) * k) -
                                      (z.data() + i * k));
  }
  return out;
}

double default_gate(const ClassifierModel& model, const ConceptVector& cav, const Tensor& clean_inputs,
                    double quantile) {
  auto s = project(latent_features(model, cav.layer, clean_inputs), cav);
  if (s.empty()) throw std::invalid_argument("gate needs clean samples");
  std::sort(s.begin(), s.end());
  // Linear interpolation between order statistics.
  const double pos = quantile * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

namespace {

TcavResult summarize(std::vector<double> sens) {
  TcavResult r;
  if (sens.empty()) throw std::invalid_argument("TCAV needs a nonempty sample set");
  std::size_t positive = 0;
  double total = 0.0;
  for (double& s : sens) {
    if (std::abs(s) <= 1e-12) s = 0.0;
    positive += s > 0.0;
    total += s;
  }
  r.tcav = static_cast<double>(positive) / static_cast<double>(sens.size());
  r.delta_tcav = std::abs(r.tcav - 0.5);
  r.mean_sensitivity = total / static_cast<double>(sens.size());
  r.sensitivities = std::move(sens);
  return r;
}

std::vector<double> sensitivities(const LayerSplit& split, const Tensor& inputs, const std::vector<double>& u,
                                  std::size_t target_class) {
  std::vector<double> out;
  for (std::size_t start = 0; start < inputs.dim(0); start += 64) {
    const std::size_t m = std::min<std::size_t>(64, inputs.dim(0) - start);
    Tensor g = latent_gradient(split, inputs.slice(start, m), target_class);
    const std::size_t c = g.dim(1), l = g.size() / (m * c);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < l; ++p) s += u[k] * g[(i * c + k) * l + p];
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace

TcavResult tcav_metrics(const LayerSplit& split, const Tensor& inputs, const std::vector<double>& h,
                        std::size_t target_class) {
  if (inputs.rank() != 4 || inputs.dim(0) == 0) throw std::invalid_argument("TCAV needs a nonempty sample set");
  if (h.size() != split.channels()) throw std::invalid_argument("CAV does not match the split layer");
  return summarize(sensitivities(split, inputs, unit_of(h), target_class));
}

TcavResult tcav_metrics(const EditedModel& model, const ConceptVector& cav, const Tensor& inputs,
                        std::size_t target_class) {
  if (inputs.rank() != 4 || inputs.dim(0) == 0) throw std::invalid_argument("TCAV needs a nonempty sample set");
  LayerSplit split(model.model(), cav.layer);
  auto sens = sensitivities(split, inputs, unit_of(cav.unit), target_class);
  // A projected sample's head sees (I - h h^T) a, so its derivative along h
  // vanishes.
  auto proj = model.projected(inputs);
  for (std::size_t i = 0; i < sens.size(); ++i) {
    if (proj[i]) sens[i] = 0.0;
  }
  return summarize(std::move(sens));
}

json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"method", r.method},
          {"clean_accuracy", r.clean_accuracy},
          {"biased_accuracy", r.biased_accuracy},
          {"fpr_clean", r.fpr_clean},
          {"fpr_biased", r.fpr_biased},
          {"artifact_relevance", opt(r.artifact_relevance)},
          {"tcav", r.tcav},
          {"delta_tcav", r.delta_tcav},
          {"mean_sensitivity", r.mean_sensitivity},
          {"auc", opt(r.auc)},
          {"ap", opt(r.ap)},
          {"details", r.details}};
}

EvalReport eval_report_from_json(const json& j) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
  };
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.biased_accuracy = j.at("biased_accuracy").get<double>();
  r.fpr_clean = j.at("fpr_clean").get<double>();
  r.fpr_biased = j.at("fpr_biased").get<double>();
  r.artifact_relevance = opt("artifact_relevance");
  r.tcav = j.at("tcav").get<double>();
  r.delta_tcav = j.at("delta_tcav").get<double>();
  r.mean_sensitivity = j.value("mean_sensitivity", 0.0);
  r.auc = opt("auc");
  r.ap = opt("ap");
  r.details = j.value("details", json::object());
  return r;
}

double false_positive_rate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels,
                           std::size_t attacked) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("prediction count mismatch");
  std::size_t negatives = 0, hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == attacked) continue;
    ++negatives;
    hits += predicted[i] == attacked;
  }
  return negatives == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(negatives);
}

std::optional<double> artifact_relevance(const EditedModel& model, const Dataset& data,
                                         const std::string& artifact_id, std::size_t attacked) {
  if (model.edited()) return std::nullopt;
  auto mit = data.masks.find(artifact_id);
  if (mit == data.masks.end() || mit->second.empty()) return std::nullopt;
  auto index = data.id_index();
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> rows;
  std::vector<const Tensor*> masks;
  for (const auto& [id, mask] : mit->second) {
    rows.push_back(index.at(id));
    masks.push_back(&mask);
  }
  for (std::size_t start = 0; start < rows.size(); start += 64) {
    const std::size_t m = std::min<std::size_t>(64, rows.size() - start);
    std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                   rows.begin() + static_cast<std::ptrdiff_t>(start + m));
    Tensor x = data.training_set(chunk).inputs;
    Tensor heat = attribute(model.model(), x, attacked).input;
    const std::size_t per = heat.size() / m;
    for (std::size_t i = 0; i < m; ++i) {
      Tensor one({x.dim(1), x.dim(2), x.dim(3)},
                 std::vector<double>(heat.data() + i * per, heat.data() + (i + 1) * per));
      total += relevance_fraction(heatmap_to_mask_layout(one), *masks[start + i]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

namespace {

std::map<std::string, int> split_annotations(const Dataset& data, const std::string& artifact_id, Split split) {
  std::map<std::string, int> out;
  auto it = data.annotations.find(artifact_id);
  if (it == data.annotations.end()) return out;
  for (std::size_t i : data.indices(split)) {
    auto a = it->second.find(data.samples[i].id);
    if (a != it->second.end()) out[a->first] = a->second;
  }
  return out;
}

}  // namespace

EvalReport evaluate(const EditedModel& model, const Dataset& data, const ArtifactSpec& spec,
                    const std::optional<ConceptVector>& cav) {
  if (data.indices(Split::Test).empty()) throw std::invalid_argument("dataset has no test split");
  TrainingSet clean = data.training_set(Split::Test);
  Dataset biased = biased_test_set(data, spec);
  TrainingSet bset = biased.training_set(Split::Test);
  if (bset.size() == 0) throw std::invalid_argument("missing biased test set");

  EvalReport r;
  auto pc = model.predict(clean.inputs);
  auto pb = model.predict(bset.inputs);
  std::size_t hc = 0, hb = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) hc += pc[i] == clean.labels[i];
  for (std::size_t i = 0; i < pb.size(); ++i) hb += pb[i] == bset.labels[i];
  r.clean_accuracy = static_cast<double>(hc) / static_cast<double>(pc.size());
  r.biased_accuracy = static_cast<double>(hb) / static_cast<double>(pb.size());
  r.fpr_clean = false_positive_rate(pc, clean.labels, spec.target_class);
  r.fpr_biased = false_positive_rate(pb, bset.labels, spec.target_class);
  if (spec.localizable()) r.artifact_relevance = artifact_relevance(model, biased, spec.id, spec.target_class);
  r.details["test_samples"] = pc.size();
  r.details["artifact"] = spec.id;
  r.details["attacked_class"] = spec.target_class;
  if (cav) {
    auto t = tcav_metrics(model, *cav, bset.inputs, spec.target_class);
    r.tcav = t.tcav;
    r.delta_tcav = t.delta_tcav;
    r.mean_sensitivity = t.mean_sensitivity;
    r.details["cav_iteration"] = cav->iteration;
    r.details["cav_method"] = to_string(cav->method);
    auto held = split_annotations(data, spec.id, Split::Val);
    bool pos = false, neg = false;
    for (const auto& [id, l] : held) (l ? pos : neg) = true;
    if (pos && neg) {
      std::vector<std::string> ids;
      std::vector<std::size_t> rows;
      auto index = data.id_index();
      for (const auto& [id, l] : held) {
        ids.push_back(id);
        rows.push_back(index.at(id));
      }
      auto table = bias_scores_activation(*cav, model.model(), ids, data.training_set(rows).inputs);
      auto m = retrieval_metrics(table, held);
      r.auc = m.auc;
      r.ap = m.ap;
    }
  }
  return r;
}

std::vector<double> default_lambda_grid(MitigationMethod m) {
  std::vector<double> grid;
  if (is_projection(m) || m == MitigationMethod::Vanilla) return grid;
  const int top = m == MitigationMethod::Rrr ? 9 : 12;
  for (int e = 1; e <= top; ++e) {
    grid.push_back(std::pow(10.0, e));
    grid.push_back(5.0 * std::pow(10.0, e));
  }
  return grid;
}

namespace {

std::vector<std::size_t> poisoned_rows(const Dataset& data, const std::vector<std::size_t>& rows,
                                       const std::string& artifact_id) {
  std::vector<std::size_t> out;
  auto it = data.annotations.find(artifact_id);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (it == data.annotations.end()) break;
    auto a = it->second.find(data.samples[rows[r]].id);
    if (a != it->second.end() && a->second == 1) out.push_back(r);
  }
  return out;
}

Tensor clean_train_inputs(const Dataset& data, const std::string& artifact_id) {
  auto ann = split_annotations(data, artifact_id, Split::Train);
  auto index = data.id_index();
  std::vector<std::size_t> rows;
  for (const auto& [id, l] : ann)
    if (l == 0) rows.push_back(index.at(id));
  if (rows.empty()) throw std::invalid_argument("no clean-labeled training samples for '" + artifact_id + "'");
  std::sort(rows.begin(), rows.end());
  return data.training_set(rows).inputs;
}

}  // namespace

Tensor rrr_masks(const ClassifierModel& model, const Dataset& data, const std::vector<std::size_t>& rows,
                 const ArtifactSpec& spec, MaskSource source, const std::optional<ConceptVector>& cav) {
  if (!spec.localizable()) throw std::invalid_argument("rrr needs a localizable artifact");
  Shape shape = data.sample_shape();
  const std::size_t per = shape_size(shape);
  Shape full = shape;
  full.insert(full.begin(), rows.size());
  Tensor out(full);
  if (source == MaskSource::GroundTruth) {
    auto mit = data.masks.find(spec.id);
    if (mit == data.masks.end()) throw std::invalid_argument("no ground-truth masks for '" + spec.id + "'");
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto m = mit->second.find(data.samples[rows[r]].id);
      if (m == mit->second.end()) continue;
      Tensor in = mask_to_input(m->second, shape);
      std::copy_n(in.data(), per, out.data() + r * per);
    }
    return out;
  }
  if (!cav) throw std::invalid_argument("heatmap masks need a CAV");
  LayerSplit split(model, cav->layer);
  for (std::size_t r : poisoned_rows(data, rows, spec.id)) {
    Tensor x = data.training_set(std::vector<std::size_t>{rows[r]}).inputs;
    LocalizationResult loc = localize(*cav, split, x);
    Tensor m = loc.mask;
    if (source == MaskSource::Heatmap) {
      double top = 0.0;
      for (double v : loc.heatmap.values()) top = std::max(top, v);
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = top > 0.0 ? std::max(0.0, loc.heatmap[i]) / top : 0.0;
    }
    Tensor in = mask_to_input(m, shape);
    std::copy_n(in.data(), per, out.data() + r * per);
  }
  return out;
}

TrainResult finetune(const ClassifierModel& model, const Dataset& data, const ArtifactSpec& spec,
                     const std::optional<ConceptVector>& cav, const MitigationConfig& config, double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
  std::vector<std::size_t> rows = data.indices(Split::Train);
  TrainingSet set = data.training_set(rows);
  TrainConfig tc;
  tc.learning_rate = config.learning_rate;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.seed = config.seed;
  tc.auxiliary_weight = lambda;
  tc.max_grad_norm = config.max_grad_norm;
  if (config.method == MitigationMethod::Rrr) {
    auto masks = std::make_shared<Tensor>(rrr_masks(model, data, rows, spec, config.mask_source, cav));
    const std::size_t per = masks->size() / rows.size();
    tc.auxiliary_loss = [masks, per](const ClassifierModel& m, std::span<const ad::Var> params, const Batch& b) {
      Tensor bm(b.inputs.shape());
      for (std::size_t i = 0; i < b.indices.size(); ++i) {
        std::copy_n(masks->data() + b.indices[i] * per, per, bm.data() + i * per);
      }
      return rrr_loss(m, params, b.inputs, bm);
    };
  } else if (config.method == MitigationMethod::RrClarc) {
    if (!cav) throw std::invalid_argument("rrclarc needs a CAV");
    const std::size_t index = model.layer_index(cav->layer);
    const std::size_t target = config.target_class.value_or(spec.target_class);
    const std::vector<double> h = cav->unit;
    const LatentOutput out = config.latent_output;
    tc.auxiliary_loss = [index, target, h, out](const ClassifierModel& m, std::span<const ad::Var> params,
                                                const Batch& b) {
      return rrclarc_loss(m, params, index, b.inputs, h, target, out);
    };
  } else if (config.method != MitigationMethod::Vanilla) {
    throw std::invalid_argument("finetune handles vanilla, rrr and rrclarc only");
  }
  return train(model, set, tc);
}

MitigationResult mitigate(const ClassifierModel& model, const Dataset& data, const ArtifactSpec& spec,
                          const std::optional<ConceptVector>& cav, const MitigationConfig& config) {
  if (is_projection(config.method)) {
    if (!cav) throw std::invalid_argument(to_string(config.method) + " needs a CAV");
    Tensor clean = clean_train_inputs(data, spec.id);
    LayerSplit split(model, cav->layer);
    CleanStats stats = clean_statistics(split, clean, cav->unit, config.per_location);
    std::optional<double> gate;
    if (config.method == MitigationMethod::RpClarc) gate = config.gate.value_or(default_gate(model, *cav, clean));
    MitigationResult r{EditedModel(model, *cav, stats, gate), 0.0, {}, {}};
    r.report = evaluate(r.model, data, spec, cav);
    r.report.method = to_string(config.method);
    r.report.details["clean_mean"] = stats.mean;
    r.report.details["per_location"] = stats.per_location;
    if (gate) r.report.details["gate"] = *gate;
    return r;
  }

  TrainingSet val = data.training_set(Split::Val);
  TrainingSet bval = biased_split(data, spec, Split::Val).training_set(Split::Val);
  const double base_clean = accuracy(model, val);

  if (config.method == MitigationMethod::Vanilla) {
    MitigationResult r{EditedModel(finetune(model, data, spec, cav, config, 0.0).model), 0.0, {}, {}};
    r.report = evaluate(r.model, data, spec, cav);
    r.report.method = "vanilla";
    return r;
  }

  std::vector<double> grid = config.lambda_grid.empty() ? default_lambda_grid(config.method) : config.lambda_grid;
  if (grid.empty()) throw std::invalid_argument("empty lambda grid");
  std::vector<LambdaTrial> trials;
  std::optional<ClassifierModel> best;
  double best_lambda = 0.0, best_score = -1.0;
  for (double lambda : grid) {
    LambdaTrial t;
    t.lambda = lambda;
    try {
      TrainResult tr = finetune(model, data, spec, cav, config, lambda);
      t.ok = true;
      t.clean_val = accuracy(tr.model, val);
      t.biased_val = accuracy(tr.model, bval);
      if (t.clean_val >= base_clean - config.max_clean_drop - 1e-12 && t.biased_val > best_score) {
        best_score = t.biased_val;
        best_lambda = lambda;
        best = std::move(tr.model);
      }
    } catch (const std::runtime_error& e) {
      t.error = e.what();
    }
    trials.push_back(t);
  }
  if (!best) {
    throw std::runtime_error("no lambda in the grid kept clean validation accuracy within " +
                             std::to_string(config.max_clean_drop));
  }
  MitigationResult r{EditedModel(std::move(*best)), best_lambda, trials, {}};
  r.report = evaluate(r.model, data, spec, cav);
  r.report.method = to_string(config.method);
  r.report.details["lambda"] = best_lambda;
  r.report.details["base_clean_val"] = base_clean;
  json tj = json::array();
  for (const auto& t : trials) {
    tj.push_back({{"lambda", t.lambda}, {"ok", t.ok}, {"clean_val", t.clean_val},
                  {"biased_val", t.biased_val}, {"error", t.error}});
  }
  r.report.details["trials"] = tj;
  return r;
}

}  // namespace shortcut
