#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>

namespace shortcut {

// Sectioned key-value configuration ("section.key"). Every known key has a
// default; files and overrides may only set known keys. Empty values mean
// "unset" for optional settings.
class Config {
 public:
  Config();  // defaults

  // Overlays an INI file. Throws std::invalid_argument on unknown keys or
  // malformed files.
  void merge_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  bool known(const std::string& key) const;
  std::string get(const std::string& key) const;
  bool is_set(const std::string& key) const { return !get(key).empty(); }

  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::optional<double> get_optional_double(const std::string& key) const;
  std::optional<std::size_t> get_optional_size(const std::string& key) const;
  // Comma- or space-separated numbers.
  std::vector<double> get_doubles(const std::string& key) const;
  // "1x48x48" -> {1, 48, 48}.
  std::vector<std::size_t> get_shape(const std::string& key) const;

  std::string dump() const;  // INI text, sections in a fixed order
  void save(const std::filesystem::path& path) const;

  static const std::vector<std::string>& sections();

 private:
  boost::property_tree::ptree tree_;
};

}  // namespace shortcut
