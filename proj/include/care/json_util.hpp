#pragma once

#include <nlohmann/json.hpp>

namespace care {

// nlohmann has no direct json -> ordered_json conversion.
inline nlohmann::ordered_json to_ordered(const nlohmann::json& value) {
    return nlohmann::ordered_json::parse(value.dump());
}

}  // namespace care
