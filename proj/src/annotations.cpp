#include "shortcut/annotations.hpp"

#include <chrono>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace shortcut {

using nlohmann::json;

std::string to_string(LabelSource s) {
  switch (s) {
    case LabelSource::Seed: return "seed";
    case LabelSource::Manual: return "manual";
    case LabelSource::GroundTruth: return "ground-truth";
  }
  return "manual";
}

LabelSource parse_label_source(std::string_view id) {
  if (id == "seed") return LabelSource::Seed;
  if (id == "manual") return LabelSource::Manual;
  if (id == "ground-truth") return LabelSource::GroundTruth;
  throw std::invalid_argument("unknown label source: " + std::string(id));
}

json to_json(const AnnotationRecord& r) {
  return {{"sample_id", r.sample_id}, {"artifact_id", r.artifact_id}, {"label", r.label},
          {"source", to_string(r.source)}, {"iteration", r.iteration}, {"timestamp", r.timestamp}};
}

AnnotationRecord annotation_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("annotation must be a JSON object");
  AnnotationRecord r;
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) {
      throw std::invalid_argument(std::string("annotation needs a non-empty string '") + key + "'");
    }
    return j[key].get<std::string>();
  };
  r.sample_id = str("sample_id");
  r.artifact_id = str("artifact_id");
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw std::invalid_argument("annotation label must be 0 or 1");
  }
  const auto label = j["label"].get<std::int64_t>();
  if (label != 0 && label != 1) throw std::invalid_argument("annotation label must be 0 or 1");
  r.label = static_cast<int>(label);
  if (j.contains("source")) {
    if (!j["source"].is_string()) throw std::invalid_argument("annotation source must be a string");
    r.source = parse_label_source(j["source"].get<std::string>());
  }
  if (j.contains("iteration")) {
    if (!j["iteration"].is_number_unsigned()) throw std::invalid_argument("annotation iteration must be >= 0");
    r.iteration = j["iteration"].get<std::size_t>();
  }
  if (j.contains("timestamp")) {
    if (!j["timestamp"].is_number_unsigned()) throw std::invalid_argument("annotation timestamp must be >= 0");
    r.timestamp = j["timestamp"].get<std::uint64_t>();
  }
  return r;
}

AnnotationStore::AnnotationStore(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(*path_)) return;
  std::ifstream in(*path_);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      AnnotationRecord r = annotation_from_json(json::parse(line));
      if (r.timestamp <= last_) throw std::invalid_argument("timestamps not increasing");
      last_ = r.timestamp;
      index_[r.artifact_id][r.sample_id] = log_.size();
      log_.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path_->string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

AnnotationRecord AnnotationStore::append_locked(AnnotationRecord r, bool keep_timestamp) {
  if (r.label != 0 && r.label != 1) throw std::invalid_argument("annotation label must be 0 or 1");
  if (keep_timestamp) {
    if (r.timestamp <= last_) throw std::invalid_argument("imported timestamp is not increasing");
  } else {
    const auto now = std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    r.timestamp = std::max<std::uint64_t>(static_cast<std::uint64_t>(now), last_ + 1);
  }
  if (path_) {
    std::ofstream out(*path_, std::ios::app);
    out << to_json(r).dump() << "\n";
    out.flush();
    if (!out) throw std::runtime_error("cannot append to " + path_->string());
  }
  last_ = r.timestamp;
  index_[r.artifact_id][r.sample_id] = log_.size();
  log_.push_back(r);
  return r;
}

AnnotationRecord AnnotationStore::append(AnnotationRecord r, bool keep_timestamp) {
  std::lock_guard lock(mutex_);
  return append_locked(std::move(r), keep_timestamp);
}

std::vector<AnnotationRecord> AnnotationStore::records() const {
  std::lock_guard lock(mutex_);
  return log_;
}

std::optional<AnnotationRecord> AnnotationStore::latest(const std::string& artifact_id,
                                                        const std::string& sample_id) const {
  std::lock_guard lock(mutex_);
  auto a = index_.find(artifact_id);
  if (a == index_.end()) return std::nullopt;
  auto s = a->second.find(sample_id);
  if (s == a->second.end()) return std::nullopt;
  return log_[s->second];
}

std::map<std::string, int> AnnotationStore::labels(const std::string& artifact_id,
                                                   const std::vector<LabelSource>& sources) const {
  std::map<std::string, int> out;
  for (const auto& r : latest_records(artifact_id)) {
    bool keep = sources.empty();
    for (LabelSource s : sources) keep = keep || s == r.source;
    if (keep) out[r.sample_id] = r.label;
  }
  return out;
}

std::vector<AnnotationRecord> AnnotationStore::latest_records(const std::string& artifact_id) const {
  std::lock_guard lock(mutex_);
  std::vector<AnnotationRecord> out;
  auto a = index_.find(artifact_id);
  if (a == index_.end()) return out;
  for (const auto& [sample, pos] : a->second) out.push_back(log_[pos]);
  return out;
}

std::vector<std::string> AnnotationStore::artifacts() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [a, unused] : index_) out.push_back(a);
  return out;
}

std::size_t AnnotationStore::size() const {
  std::lock_guard lock(mutex_);
  return log_.size();
}

void AnnotationStore::export_jsonl(std::ostream& out) const {
  for (const auto& r : records()) out << to_json(r).dump() << "\n";
}

std::size_t AnnotationStore::import_jsonl(std::istream& in) {
  std::lock_guard lock(mutex_);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    append_locked(annotation_from_json(json::parse(line)), true);
    ++n;
  }
  return n;
}

}  // namespace shortcut
