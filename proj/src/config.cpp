#include "shortcut/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>

namespace shortcut {
namespace {

using Entries = std::vector<std::pair<std::string, std::string>>;

const std::map<std::string, Entries>& defaults() {
  static const std::map<std::string, Entries> d = {
      {"dataset",
       {{"name", "synthetic"}, {"modality", "image"}, {"classes", "2"}, {"per_class", "300"},
        {"shape", "1x48x48"}, {"noise", "0.08"}, {"seed", "1"}}},
      {"artifact",
       {{"id", "artifact"}, {"kind", "corner-patch"}, {"rate", "0.3"}, {"target_class", "1"},
        {"seed", "2"}, {"patch_size", "8"}, {"channel", "0"}, {"window_start", "0"},
        {"window_length", "0.1"}, {"amplitude", "5"}}},
      {"model",
       {{"arch", "image-cnn-small"}, {"epochs", "30"}, {"lr", "0.05"}, {"batch_size", "32"},
        {"seed", "3"}}},
      {"cav",
       {{"method", "svm"}, {"layer", "pool3"}, {"space", "activation"}, {"target_class", ""},
        {"lambda", "0.01"}, {"iterations", "5000"}, {"sign", "positive"}}},
      {"mitigation",
       {{"lambda_grid", ""}, {"target_class", ""}, {"mask_source", "ground-truth"},
        {"epochs", "5"}, {"lr", "0.005"}, {"batch_size", "32"}, {"seed", "0"}, {"gate", ""},
        {"per_location", "true"}, {"latent_output", "margin"}, {"max_grad_norm", "0"},
        {"max_clean_drop", "0.05"}}},
      {"service",
       {{"host", "127.0.0.1"}, {"port", "8080"}, {"page_size", "20"}, {"thumbnail", "128"},
        {"prototypes", "3"}, {"clusters", "3"}}},
  };
  return d;
}

}  // namespace

const std::vector<std::string>& Config::sections() {
  static const std::vector<std::string> s = {"dataset", "artifact", "model", "cav", "mitigation", "service"};
  return s;
}

Config::Config() {
  for (const auto& [section, entries] : defaults()) {
    for (const auto& [k, v] : entries) tree_.put(section + "." + k, v);
  }
}

bool Config::known(const std::string& key) const {
  const auto dot = key.find('.');
  if (dot == std::string::npos) return false;
  auto it = defaults().find(key.substr(0, dot));
  if (it == defaults().end()) return false;
  const std::string name = key.substr(dot + 1);
  for (const auto& e : it->second)
    if (e.first == name) return true;
  return false;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw std::invalid_argument("unknown config key: " + key);
  tree_.put(key, value);
}

void Config::merge_file(const std::filesystem::path& path) {
  boost::property_tree::ptree file;
  try {
    boost::property_tree::read_ini(path.string(), file);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument(e.what());
  }
  for (const auto& [section, body] : file) {
    if (body.empty() && !body.data().empty()) {
      throw std::invalid_argument(path.string() + ": key outside a section: " + section);
    }
    if (!defaults().count(section)) throw std::invalid_argument(path.string() + ": unknown section [" + section + "]");
    for (const auto& [k, v] : body) set(section + "." + k, v.data());
  }
}

std::string Config::get(const std::string& key) const {
  if (!known(key)) throw std::invalid_argument("unknown config key: " + key);
  return tree_.get<std::string>(key);
}

double Config::get_double(const std::string& key) const {
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": not a number: '" + v + "'");
  }
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const std::string v = get(key);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument(key + ": not a non-negative integer: '" + v + "'");
  }
  return out;
}

std::size_t Config::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

bool Config::get_bool(const std::string& key) const {
  const std::string v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument(key + ": not a boolean: '" + v + "'");
}

std::optional<double> Config::get_optional_double(const std::string& key) const {
  if (!is_set(key)) return std::nullopt;
  return get_double(key);
}

std::optional<std::size_t> Config::get_optional_size(const std::string& key) const {
  if (!is_set(key)) return std::nullopt;
  return get_size(key);
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::string v = get(key);
  for (char& c : v)
    if (c == ',') c = ' ';
  std::istringstream in(v);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw std::invalid_argument(key + ": not a number list: '" + get(key) + "'");
    out.push_back(d);
  }
  return out;
}

std::vector<std::size_t> Config::get_shape(const std::string& key) const {
  const std::string v = get(key);
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t end = std::min(v.find('x', start), v.size());
    std::size_t d = 0;
    auto [p, ec] = std::from_chars(v.data() + start, v.data() + end, d);
    if (ec != std::errc() || p != v.data() + end || d == 0) {
      throw std::invalid_argument(key + ": bad shape '" + v + "' (expected e.g. 1x48x48)");
    }
    out.push_back(d);
    start = end + 1;
  }
  return out;
}

std::string Config::dump() const {
  std::ostringstream out;
  for (const std::string& s : sections()) {
    out << "[" << s << "]\n";
    for (const auto& [k, unused] : defaults().at(s)) out << k << " = " << tree_.get<std::string>(s + "." + k) << "\n";
    out << "\n";
  }
  return out.str();
}

void Config::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << dump();
}

}  // namespace shortcut
