#include "shortcut/bias_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "shortcut/attribution.hpp"
#include "shortcut/retrieval.hpp"

namespace shortcut {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(CavMethod m) {
  switch (m) {
    case CavMethod::Svm: return "svm";
    case CavMethod::Pattern: return "pattern";
    case CavMethod::Neuron: return "neuron";
  }
  return "svm";
}

CavMethod parse_cav_method(std::string_view id) {
  if (id == "svm") return CavMethod::Svm;
  if (id == "pattern") return CavMethod::Pattern;
  if (id == "neuron") return CavMethod::Neuron;
  throw std::invalid_argument("unknown CAV method '" + std::string(id) + "'");
}

std::string to_string(FeatureSpace s) {
  return s == FeatureSpace::Activation ? "activation" : "relevance";
}

FeatureSpace parse_feature_space(std::string_view id) {
  if (id == "activation") return FeatureSpace::Activation;
  if (id == "relevance") return FeatureSpace::Relevance;
  throw std::invalid_argument("unknown feature space '" + std::string(id) + "'");
}

namespace {

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " has non-finite values");
  }
}

void finish(ConceptVector& c) {
  double norm = 0.0;
  for (double v : c.raw) norm += v * v;
  norm = std::sqrt(norm);
  c.unit.assign(c.raw.size(), 0.0);
  c.degenerate = !(norm > 1e-12);
  if (!c.degenerate) {
    for (std::size_t i = 0; i < c.raw.size(); ++i) c.unit[i] = c.raw[i] / norm;
  }
  c.diagnostics["raw_norm"] = norm;
}

}  // namespace

ConceptVector fit_svm_cav(const Tensor& pos, const Tensor& neg, const SvmOptions& options) {
  if (pos.rank() != 2 || neg.rank() != 2 || pos.dim(0) == 0 || neg.dim(0) == 0) {
    throw std::invalid_argument("SVM-CAV needs nonempty positive and negative sets");
  }
  if (pos.dim(1) != neg.dim(1)) throw std::invalid_argument("feature dimension mismatch");
  if (!(options.lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  require_finite(pos, "positive set");
  require_finite(neg, "negative set");

  const std::size_t np = pos.dim(0), nn = neg.dim(0), c = pos.dim(1), n = np + nn;
  auto row = [&](std::size_t i) { return i < np ? pos.data() + i * c : neg.data() + (i - np) * c; };
  auto sign = [&](std::size_t i) { return i < np ? 1.0 : -1.0; };

  std::vector<double> w(c, 0.0), gw(c), best_w(c, 0.0);
  double b = 0.0, best_b = 0.0, best_obj = std::numeric_limits<double>::infinity();
  std::size_t best_iter = 0;
  auto margin = [&](std::size_t i, const std::vector<double>& wv, double bv) {
    const double* a = row(i);
    double s = bv;
    for (std::size_t j = 0; j < c; ++j) s += wv[j] * a[j];
    return sign(i) * s;
  };
  for (std::size_t t = 1; t <= options.iterations + 1; ++t) {
    // Objective of the current iterate; also collects the subgradient.
    double hinge = 0.0, sq = 0.0, gb = 0.0;
    std::fill(gw.begin(), gw.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = margin(i, w, b);
      if (m < 1.0) {
        hinge += 1.0 - m;
        const double* a = row(i);
        for (std::size_t j = 0; j < c; ++j) gw[j] -= sign(i) * a[j];
        gb -= sign(i);
      }
    }
    for (double v : w) sq += v * v;
    const double obj = hinge / static_cast<double>(n) + 0.5 * options.lambda * sq;
    if (obj < best_obj) {
      best_obj = obj;
      best_w = w;
      best_b = b;
      best_iter = t - 1;
    }
    if (t > options.iterations) break;
    const double eta = 1.0 / (options.lambda * static_cast<double>(t));
    for (std::size_t j = 0; j < c; ++j) {
      w[j] -= eta * (options.lambda * w[j] + gw[j] / static_cast<double>(n));
    }
    b -= eta * gb / static_cast<double>(n);
  }

  ConceptVector cav;
  cav.method = CavMethod::Svm;
  cav.raw = best_w;
  cav.bias = best_b;
  std::size_t violations = 0, misclassified = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = margin(i, best_w, best_b);
    violations += m < 1.0;
    misclassified += m <= 0.0;
  }
  cav.diagnostics = {{"objective", best_obj},          {"best_iteration", best_iter},
                     {"lambda", options.lambda},       {"iterations", options.iterations},
                     {"margin_violations", violations}, {"training_errors", misclassified},
                     {"positives", np},                {"negatives", nn}};
  finish(cav);
  return cav;
}

ConceptVector fit_pattern_cav(const Tensor& features, const std::vector<int>& labels) {
  if (features.rank() != 2 || features.dim(0) != labels.size() || labels.empty()) {
    throw std::invalid_argument("Pattern-CAV needs [N, C] features with N labels");
  }
  require_finite(features, "features");
  const std::size_t n = features.dim(0), c = features.dim(1);
  double t_mean = 0.0;
  for (int t : labels) {
    if (t != 0 && t != 1) throw std::invalid_argument("labels must be 0 or 1");
    t_mean += t;
  }
  t_mean /= static_cast<double>(n);
  const double t_var = t_mean * (1.0 - t_mean);
  if (!(t_var > 0.0)) throw std::invalid_argument("Pattern-CAV needs both labels present");

  std::vector<double> mean(c, 0.0), cov(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += features[i * c + j];
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dt = labels[i] - t_mean;
    for (std::size_t j = 0; j < c; ++j) cov[j] += (features[i * c + j] - mean[j]) * dt;
  }
  ConceptVector cav;
  cav.method = CavMethod::Pattern;
  cav.raw.resize(c);
  double cov_norm = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    cav.raw[j] = cov[j] / (t_var * static_cast<double>(n));
    cov_norm += (cov[j] / static_cast<double>(n)) * (cov[j] / static_cast<double>(n));
  }
  const std::size_t positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  cav.diagnostics = {{"covariance_norm", std::sqrt(cov_norm)},
                     {"label_variance", t_var},
                     {"positives", positives},
                     {"negatives", n - positives}};
  finish(cav);
  return cav;
}

ConceptVector neuron_cav(std::string layer, std::size_t channel, std::size_t channels) {
  if (channel >= channels) {
    throw std::out_of_range("channel " + std::to_string(channel) + " >= " + std::to_string(channels));
  }
  ConceptVector cav;
  cav.layer = std::move(layer);
  cav.method = CavMethod::Neuron;
  cav.raw.assign(channels, 0.0);
  cav.raw[channel] = 1.0;
  cav.diagnostics = {{"channel", channel}};
  finish(cav);
  return cav;
}

ConceptVector fit_cav(CavMethod method, const Tensor& features, const std::vector<int>& labels,
                      const SvmOptions& options) {
  if (method == CavMethod::Pattern) return fit_pattern_cav(features, labels);
  if (method == CavMethod::Neuron) throw std::invalid_argument("neuron CAVs are not fitted");
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw std::invalid_argument("features and labels disagree");
  }
  const std::size_t c = features.dim(1);
  std::vector<double> p, q;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& dst = labels[i] == 1 ? p : q;
    dst.insert(dst.end(), features.data() + i * c, features.data() + (i + 1) * c);
  }
  return fit_svm_cav(Tensor({p.size() / std::max<std::size_t>(c, 1), c}, p),
                     Tensor({q.size() / std::max<std::size_t>(c, 1), c}, q), options);
}

std::string label_fingerprint(const std::map<std::string, int>& labels) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](unsigned char byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  for (const auto& [id, label] : labels) {
    for (char ch : id) mix(static_cast<unsigned char>(ch));
    mix(0);
    mix(static_cast<unsigned char>('0' + label));
    mix(0xff);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Tensor latent_features(const ClassifierModel& model, std::string_view layer, const Tensor& inputs,
                       FeatureSpace space, std::optional<std::size_t> target_class) {
  const std::size_t index = model.layer_index(layer);
  const std::size_t c = model.output_shape(index).at(0);
  const std::size_t n = inputs.dim(0);
  if (space == FeatureSpace::Relevance) {
    if (!target_class) throw std::invalid_argument("relevance features need a target class");
    if (*target_class >= model.num_classes()) {
      throw std::out_of_range("class " + std::to_string(*target_class) + " out of range");
    }
  }
  Tensor out({n, c});
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor x = inputs.slice(start, count);
    Tensor s;
    if (space == FeatureSpace::Activation) {
      s = pool_spatial(model.activations(x, layer), Pooling::Max);
    } else {
      RuleConfig cfg;
      cfg.stop_layer = std::string(layer);
      s = pool_spatial(attribute(model, x, *target_class, cfg).at(layer), Pooling::Max);
    }
    std::copy_n(s.data(), count * c, out.data() + start * c);
  }
  return out;
}

json to_json(const ConceptVector& c) {
  json j = {{"artifact_id", c.artifact_id},
            {"layer", c.layer},
            {"method", to_string(c.method)},
            {"space", to_string(c.space)},
            {"pooling", to_string(c.pooling)},
            {"iteration", c.iteration},
            {"fingerprint", c.fingerprint},
            {"degenerate", c.degenerate},
            {"bias", c.bias},
            {"diagnostics", c.diagnostics},
            {"vector", c.raw},
            {"unit", c.unit}};
  j["target_class"] = c.target_class ? json(*c.target_class) : json(nullptr);
  return j;
}

ConceptVector cav_from_json(const json& j) {
  ConceptVector c;
  c.artifact_id = j.at("artifact_id").get<std::string>();
  c.layer = j.at("layer").get<std::string>();
  c.method = parse_cav_method(j.at("method").get<std::string>());
  c.space = parse_feature_space(j.value("space", std::string("activation")));
  c.pooling = parse_pooling(j.value("pooling", std::string("max")));
  c.iteration = j.value("iteration", std::size_t{0});
  c.fingerprint = j.value("fingerprint", std::string());
  c.bias = j.value("bias", 0.0);
  c.diagnostics = j.value("diagnostics", json::object());
  c.raw = j.at("vector").get<std::vector<double>>();
  if (j.contains("target_class") && !j["target_class"].is_null()) {
    c.target_class = j["target_class"].get<std::size_t>();
  }
  finish(c);
  c.diagnostics = j.value("diagnostics", json::object());
  return c;
}

void save_cav(const ConceptVector& c, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

ConceptVector load_cav(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return cav_from_json(json::parse(in));
}

fs::path CavRegistry::save(const ConceptVector& c) const {
  fs::path p = root_ / c.artifact_id / ("iter_" + std::to_string(c.iteration) + ".json");
  save_cav(c, p);
  return p;
}

std::vector<std::size_t> CavRegistry::iterations(const std::string& artifact_id) const {
  std::vector<std::size_t> out;
  fs::path dir = root_ / artifact_id;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("iter_", 0) == 0 && entry.path().extension() == ".json") {
      out.push_back(std::stoul(name.substr(5, name.size() - 10)));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

ConceptVector CavRegistry::load(const std::string& artifact_id, std::size_t iteration) const {
  return load_cav(root_ / artifact_id / ("iter_" + std::to_string(iteration) + ".json"));
}

std::optional<ConceptVector> CavRegistry::latest(const std::string& artifact_id) const {
  auto its = iterations(artifact_id);
  if (its.empty()) return std::nullopt;
  return load(artifact_id, its.back());
}

namespace {

Tensor rows_for(const Dataset& data, const std::map<std::string, int>& labels,
                std::vector<int>& out_labels, std::vector<std::string>& ids) {
  auto index = data.id_index();
  std::vector<std::size_t> rows;
  for (const auto& [id, label] : labels) {
    auto it = index.find(id);
    if (it == index.end()) throw std::invalid_argument("unknown sample id '" + id + "'");
    rows.push_back(it->second);
    out_labels.push_back(label);
    ids.push_back(id);
  }
  return data.training_set(rows).inputs;
}

}  // namespace

RefitResult refit_iteration(const Dataset& data, const ClassifierModel& model,
                            const RefitRequest& request) {
  std::size_t pos = 0, neg = 0;
  for (const auto& [id, label] : request.labels) (label == 1 ? pos : neg)++;
  if (pos < 5 || neg < 5) {
    throw std::invalid_argument("insufficient labels: need >= 5 positive and >= 5 negative, have " +
                                std::to_string(pos) + " / " + std::to_string(neg));
  }
  std::vector<int> labels;
  std::vector<std::string> ids;
  Tensor inputs = rows_for(data, request.labels, labels, ids);
  Tensor features = latent_features(model, request.layer, inputs, request.space, request.target_class);

  RefitResult result;
  result.cav = fit_cav(request.method, features, labels, request.svm);
  result.cav.artifact_id = request.artifact_id;
  result.cav.layer = request.layer;
  result.cav.space = request.space;
  result.cav.target_class = request.target_class;
  result.cav.iteration = request.previous_iteration + 1;
  result.cav.fingerprint = label_fingerprint(request.labels);

  if (!request.held_out.empty()) {
    std::vector<int> truth;
    std::vector<std::string> held_ids;
    Tensor held = rows_for(data, request.held_out, truth, held_ids);
    auto scores = project(
        latent_features(model, request.layer, held, request.space, request.target_class), result.cav);
    auto m = retrieval_metrics(scores, truth);
    result.auc = m.auc;
    result.ap = m.ap;
    result.cav.diagnostics["held_out_auc"] = m.auc;
    result.cav.diagnostics["held_out_ap"] = m.ap;
  }
  return result;
}

}  // namespace shortcut
