#include "shortcut/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace shortcut {

using nlohmann::json;

std::vector<double> project(const Tensor& features, const ConceptVector& cav) {
  if (features.rank() != 2 || features.dim(1) != cav.channels()) {
    throw std::invalid_argument("CAV has " + std::to_string(cav.channels()) +
                                " channels, features have shape " + shape_string(features.shape()));
  }
  const std::size_t n = features.dim(0), c = features.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += cav.unit[j] * features[i * c + j];
    out[i] = s;
  }
  return out;
}

namespace {

void check_ids(const std::vector<std::string>& ids, const Tensor& inputs) {
  if (inputs.rank() == 0 || ids.size() != inputs.dim(0)) {
    throw std::invalid_argument("one id per input row required");
  }
}

void check_layer(const ConceptVector& cav, const ClassifierModel& model) {
  if (!model.has_layer(cav.layer)) throw std::invalid_argument("model has no layer '" + cav.layer + "'");
  const std::size_t c = model.output_shape(model.layer_index(cav.layer)).at(0);
  if (c != cav.channels()) {
    throw std::invalid_argument("CAV has " + std::to_string(cav.channels()) + " channels, layer '" +
                                cav.layer + "' has " + std::to_string(c));
  }
}

}  // namespace

BiasScoreTable bias_scores_activation(const ConceptVector& cav, const ClassifierModel& model,
                                      const std::vector<std::string>& ids, const Tensor& inputs) {
  check_ids(ids, inputs);
  check_layer(cav, model);
  BiasScoreTable t;
  t.artifact_id = cav.artifact_id;
  t.cav_iteration = cav.iteration;
  t.kind = FeatureSpace::Activation;
  t.sample_ids = ids;
  t.scores = project(latent_features(model, cav.layer, inputs), cav);
  return t;
}

BiasScoreTable bias_scores_relevance(const ConceptVector& cav, const ClassifierModel& model,
                                     const std::vector<std::string>& ids, const Tensor& inputs,
                                     std::optional<std::size_t> target_class) {
  check_ids(ids, inputs);
  check_layer(cav, model);
  const auto cls = target_class ? target_class : cav.target_class;
  if (!cls) throw std::invalid_argument("relevance scores need a target class");
  if (*cls >= model.num_classes()) throw std::out_of_range("class index out of range");
  BiasScoreTable t;
  t.artifact_id = cav.artifact_id;
  t.cav_iteration = cav.iteration;
  t.kind = FeatureSpace::Relevance;
  t.target_class = cls;
  t.sample_ids = ids;
  t.scores = project(latent_features(model, cav.layer, inputs, FeatureSpace::Relevance, cls), cav);
  return t;
}

namespace {

void check_truth(const std::vector<double>& scores, const std::vector<int>& truth) {
  if (scores.size() != truth.size()) throw std::invalid_argument("scores and labels differ in length");
  bool pos = false, neg = false;
  for (int t : truth) {
    if (t != 0 && t != 1) throw std::invalid_argument("labels must be 0 or 1");
    (t ? pos : neg) = true;
  }
  if (!pos || !neg) throw std::invalid_argument("retrieval metrics need both labels present");
}

}  // namespace

double auc_score(const std::vector<double>& scores, const std::vector<int>& truth) {
  check_truth(scores, truth);
  // Rank-sum form with average ranks for ties.
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (truth[order[k]]) {
        rank_sum += avg;
        ++pos;
      }
    }
    i = j;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(n - pos);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& truth) {
  check_truth(scores, truth);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double total = static_cast<double>(std::count(truth.begin(), truth.end(), 1));
  double ap = 0.0, tp = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += truth[order[j]];
      ++j;
    }
    const double recall = tp / total, precision = tp / static_cast<double>(j);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

RetrievalMetrics retrieval_metrics(const std::vector<double>& scores, const std::vector<int>& truth) {
  return {auc_score(scores, truth), average_precision(scores, truth)};
}

RetrievalMetrics retrieval_metrics(const BiasScoreTable& table, const std::map<std::string, int>& truth) {
  std::vector<double> s;
  std::vector<int> t;
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto it = truth.find(table.sample_ids[i]);
    if (it == truth.end()) continue;
    s.push_back(table.scores[i]);
    t.push_back(it->second);
  }
  return retrieval_metrics(s, t);
}

std::size_t InspectionQueue::page_count() const {
  if (page_size == 0 || order.empty()) return order.empty() ? 0 : 1;
  return (order.size() + page_size - 1) / page_size;
}

std::vector<std::string> InspectionQueue::page(std::size_t index) const {
  if (page_size == 0) return index == 0 ? order : std::vector<std::string>{};
  const std::size_t begin = index * page_size;
  if (begin >= order.size()) return {};
  const std::size_t end = std::min(order.size(), begin + page_size);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

InspectionQueue rank_for_inspection(const BiasScoreTable& scores,
                                    const std::map<std::string, int>& annotations,
                                    std::size_t page_size, bool exclude_negatives) {
  InspectionQueue q;
  q.artifact_id = scores.artifact_id;
  q.cav_iteration = scores.cav_iteration;
  q.page_size = page_size;

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores.scores[a] > scores.scores[b]; });
  std::map<std::string, std::vector<std::size_t>> subsets;
  for (std::size_t i : idx) {
    auto it = annotations.find(scores.sample_ids[i]);
    const char* subset = it == annotations.end() ? "unlabeled" : it->second == 1 ? "positive" : "negative";
    subsets[subset].push_back(i);
    if (it != annotations.end() && (it->second == 1 || exclude_negatives)) continue;
    q.order.push_back(scores.sample_ids[i]);
    q.scores.push_back(scores.scores[i]);
  }
  for (auto& [name, members] : subsets) {
    // members are in descending order; percentiles are taken ascending.
    std::vector<std::string> picks;
    for (double p : {1.0, 50.0, 99.0}) {
      const auto rank = static_cast<std::size_t>(std::lround(p / 100.0 * static_cast<double>(members.size() - 1)));
      picks.push_back(scores.sample_ids[members[members.size() - 1 - rank]]);
    }
    q.exemplars[name] = picks;
  }
  return q;
}

std::vector<std::size_t> otsu_bins(const std::vector<double>& values) {
  double top = 0.0;
  for (double v : values) top = std::max(top, v);
  std::vector<std::size_t> bins(values.size(), 0);
  if (!(top > 0.0)) return bins;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::max(0.0, values[i]);
    bins[i] = std::min<std::size_t>(255, static_cast<std::size_t>(std::floor(v / top * 255.0)));
  }
  return bins;
}

OtsuResult otsu_threshold(const std::vector<double>& values) {
  OtsuResult r;
  double top = 0.0;
  for (double v : values) top = std::max(top, v);
  if (!(top > 0.0) || values.empty()) return r;
  std::vector<std::int64_t> hist(256, 0);
  for (std::size_t b : otsu_bins(values)) ++hist[b];

  const auto n = static_cast<std::int64_t>(values.size());
  std::int64_t total = 0;
  for (std::int64_t b = 0; b < 256; ++b) total += b * hist[b];
  // Between-class variance times n^2 is (s0 w1 - s1 w0)^2 / (w0 w1); compared
  // exactly by cross-multiplication.
  __int128 best_num = -1, best_den = 1;
  std::int64_t w0 = 0, s0 = 0;
  for (std::int64_t t = 0; t < 255; ++t) {
    w0 += hist[t];
    s0 += t * hist[t];
    const std::int64_t w1 = n - w0, s1 = total - s0;
    if (w0 == 0 || w1 == 0) continue;
    const __int128 d = static_cast<__int128>(s0) * w1 - static_cast<__int128>(s1) * w0;
    const __int128 num = d * d, den = static_cast<__int128>(w0) * w1;
    if (best_num < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      r.bin = static_cast<std::size_t>(t);
    }
  }
  if (best_num < 0) {
    // All values share one bin: the mask keeps the positive ones.
    r.bin = 0;
    r.threshold = std::nextafter(0.0, 1.0);
    return r;
  }
  // Smallest value of the upper class, so that value >= threshold is exact.
  const auto bins = otsu_bins(values);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (bins[i] > r.bin) r.threshold = std::min(r.threshold, values[i]);
  }
  return r;
}

std::string to_string(RelevanceSign s) {
  switch (s) {
    case RelevanceSign::Positive: return "positive";
    case RelevanceSign::Absolute: return "absolute";
    case RelevanceSign::Signed: return "signed";
  }
  return "positive";
}

RelevanceSign parse_relevance_sign(std::string_view id) {
  if (id == "positive") return RelevanceSign::Positive;
  if (id == "absolute") return RelevanceSign::Absolute;
  if (id == "signed") return RelevanceSign::Signed;
  throw std::invalid_argument("unknown sign policy '" + std::string(id) + "'");
}

double iou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.5, y = b[i] > 0.5;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double relevance_fraction(const Tensor& heatmap, const Tensor& mask, RelevanceSign sign) {
  if (heatmap.shape() != mask.shape()) throw std::invalid_argument("heatmap and mask shapes differ");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    double v = heatmap[i];
    if (sign == RelevanceSign::Positive) v = std::max(0.0, v);
    if (sign == RelevanceSign::Absolute) v = std::abs(v);
    total += v;
    if (mask[i] > 0.5) inside += v;
  }
  return total == 0.0 ? 0.0 : inside / total;
}

Tensor heatmap_to_mask_layout(const Tensor& heatmap) {
  if (heatmap.rank() != 3) throw std::invalid_argument("heatmap must be [C, H, W]");
  const std::size_t c = heatmap.dim(0), h = heatmap.dim(1), w = heatmap.dim(2);
  if (h == 1) return heatmap.reshaped({c, w});
  Tensor out({h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * w; ++i) out[i] += heatmap[k * h * w + i];
  return out;
}

LocalizationResult localize(const ConceptVector& cav, const LayerSplit& split, const Tensor& x,
                            const std::optional<Tensor>& truth, RelevanceSign sign,
                            const RuleConfig& rule) {
  if (cav.layer != split.layer()) {
    throw std::invalid_argument("CAV layer '" + cav.layer + "' does not match split layer '" +
                                split.layer() + "'");
  }
  if (x.rank() != 4 || x.dim(0) != 1) throw std::invalid_argument("localize takes one sample [1, C, H, W]");
  Attribution a = concept_heatmap(split, x, cav.unit, rule);
  LocalizationResult r;
  r.artifact_id = cav.artifact_id;
  r.heatmap = heatmap_to_mask_layout(a.input.reshaped({x.dim(1), x.dim(2), x.dim(3)}));
  OtsuResult o = otsu_threshold(r.heatmap.storage());
  r.threshold = o.threshold;
  r.mask = Tensor(r.heatmap.shape());
  for (std::size_t i = 0; i < r.mask.size(); ++i) r.mask[i] = r.heatmap[i] >= o.threshold ? 1.0 : 0.0;
  if (truth) {
    r.iou = iou(r.mask, *truth);
    r.relevance_fraction = relevance_fraction(r.heatmap, *truth, sign);
  }
  return r;
}

json to_json(const BiasScoreTable& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.size(); ++i) rows.push_back({{"id", t.sample_ids[i]}, {"score", t.scores[i]}});
  json j = {{"artifact_id", t.artifact_id},
            {"cav_iteration", t.cav_iteration},
            {"kind", to_string(t.kind)},
            {"scores", rows}};
  j["target_class"] = t.target_class ? json(*t.target_class) : json(nullptr);
  return j;
}

json to_json(const InspectionQueue& q) {
  return {{"artifact_id", q.artifact_id}, {"cav_iteration", q.cav_iteration},
          {"page_size", q.page_size},     {"pages", q.page_count()},
          {"order", q.order},             {"scores", q.scores},
          {"exemplars", q.exemplars}};
}

json to_json(const LocalizationResult& r) {
  json j = {{"sample_id", r.sample_id},
            {"artifact_id", r.artifact_id},
            {"mask_pixels", static_cast<std::size_t>(r.mask.sum())}};
  j["threshold"] = std::isfinite(r.threshold) ? json(r.threshold) : json(nullptr);
  j["iou"] = r.iou ? json(*r.iou) : json(nullptr);
  j["relevance_fraction"] = r.relevance_fraction ? json(*r.relevance_fraction) : json(nullptr);
  return j;
}

void write_scores_csv(const std::filesystem::path& path, const BiasScoreTable& t,
                      const std::map<std::string, int>& labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,score,label\n";
  char buf[64];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", t.scores[i]);
    out << t.sample_ids[i] << ',' << buf << ',';
    auto it = labels.find(t.sample_ids[i]);
    if (it != labels.end()) out << it->second;
    out << '\n';
  }
}

}  // namespace shortcut
