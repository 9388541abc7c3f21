/*
 * Copyright 2026 The icm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


#ifndef ICM_JSON_UTIL_HPP_
#define ICM_JSON_UTIL_HPP_

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "icm/errors.hpp"

namespace icm {

// Throws ConfigError naming the first key of `j` outside `allowed`.
inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<std::string_view> allowed,
                       std::string_view context) {
  if (!j.is_object()) {
    throw ConfigError(std::string(context) + ": expected an object");
  }
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) {
      throw ConfigError(std::string(context) + ": unknown field '" + key + "'");
    }
  }
}

// j[key] converted to T, or `fallback` when absent. Type errors become
// ConfigError.
template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback,
         std::string_view context) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(context) + ": field '" + key + "': " + e.what());
  }
}

template <class T>
T get_required(const nlohmann::json& j, const char* key, std::string_view context) {
  if (!j.contains(key)) {
    throw ConfigError(std::string(context) + ": missing field '" + key + "'");
  }
  return get_or<T>(j, key, T{}, context);
}

}  // namespace icm

#endif  // ICM_JSON_UTIL_HPP_
