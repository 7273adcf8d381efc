#pragma once

#include <string>

#include <json.hpp>

#include "mic/error.hpp"

namespace mic::detail {

/// Reads `key` from object `j` if present, converting to T. Type mismatches
/// raise ConfigError naming `path.key`.
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out,
                const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

template <typename T>
T require_field(const nlohmann::json& j, const char* key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) {
    throw ConfigError(path + "." + key + ": missing required field");
  }
  T out{};
  read_field(j, key, out, path);
  return out;
}

}  // namespace mic::detail
