#pragma once

#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

namespace dvsm {

using json = nlohmann::json;

// Strict object check: every listed key present, nothing else. Configs fail
// loudly on typos instead of silently running with defaults.
inline void require_keys(const json& j, std::initializer_list<const char*> keys,
                         const std::string& what) {
  if (!j.is_object()) throw std::invalid_argument(what + ": expected a JSON object");
  std::set<std::string> expected(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!expected.count(k)) throw std::invalid_argument(what + ": unknown key \"" + k + "\"");
  }
  for (const auto& k : expected)
    if (!j.contains(k)) throw std::invalid_argument(what + ": missing key \"" + k + "\"");
}

// nlohmann orders object keys, so a compact dump is already canonical.
inline std::string canonical_json(const json& j) { return j.dump(); }

inline json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  json j;
  is >> j;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace dvsm
