#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace shortcut {

enum class LabelSource { Seed, Manual, GroundTruth };
std::string to_string(LabelSource s);
LabelSource parse_label_source(std::string_view id);

struct AnnotationRecord {
  std::string sample_id;
  std::string artifact_id;
  int label = 0;  // 0 / 1
  LabelSource source = LabelSource::Manual;
  std::size_t iteration = 0;    // CAV iteration current when the label was given
  std::uint64_t timestamp = 0;  // strictly increasing within a store
};

nlohmann::json to_json(const AnnotationRecord& r);
// Throws std::invalid_argument on missing fields or a label other than 0 / 1.
AnnotationRecord annotation_from_json(const nlohmann::json& j);

// Append-only log with a latest-wins index per (artifact, sample). With a
// path, every append is written through and the log is replayed on open.
// Thread-safe; writes are serialized.
class AnnotationStore {
 public:
  AnnotationStore() = default;
  explicit AnnotationStore(std::filesystem::path path);

  // Assigns the timestamp (max(now in microseconds, last + 1)) unless
  // keep_timestamp is set, in which case it must exceed the last one.
  AnnotationRecord append(AnnotationRecord r, bool keep_timestamp = false);

  std::vector<AnnotationRecord> records() const;
  std::optional<AnnotationRecord> latest(const std::string& artifact_id, const std::string& sample_id) const;
  // sample id -> label; sources filters when non-empty.
  std::map<std::string, int> labels(const std::string& artifact_id,
                                    const std::vector<LabelSource>& sources = {}) const;
  std::vector<AnnotationRecord> latest_records(const std::string& artifact_id) const;
  std::vector<std::string> artifacts() const;
  std::size_t size() const;

  void export_jsonl(std::ostream& out) const;
  // Appends every record of a JSONL stream, keeping timestamps. Returns the
  // number of records read.
  std::size_t import_jsonl(std::istream& in);

 private:
  AnnotationRecord append_locked(AnnotationRecord r, bool keep_timestamp);

  std::optional<std::filesystem::path> path_;
  mutable std::mutex mutex_;
  std::vector<AnnotationRecord> log_;
  std::map<std::string, std::map<std::string, std::size_t>> index_;  // artifact -> sample -> log position
  std::uint64_t last_ = 0;
};

}  // namespace shortcut
