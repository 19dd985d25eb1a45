#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "avlem/synthetic.hpp"

namespace avlem::testing {

inline std::filesystem::path source_dir() { return AVLEM_SOURCE_DIR; }

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small, fast synthetic corpus for unit tests.
inline SynthConfig tiny_synth(std::uint64_t seed = 3) {
  SynthConfig c;
  c.users = 12;
  c.items = 30;
  c.aspects = 8;
  c.values = 12;
  c.vocab = 120;
  c.reviews_per_user = 6;
  c.categories = 6;
  c.category_groups = 2;
  c.categories_per_item = 2;
  c.aspects_per_category = 4;
  c.review_length = 12;
  c.seed = seed;
  return c;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("avlem_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

// Subset of JSON Schema used by the published API schema: type, enum,
// required, properties, additionalProperties=false, items, minimum, $ref.
class SchemaValidator {
 public:
  explicit SchemaValidator(nlohmann::json root) : root_(std::move(root)) {}

  std::vector<std::string> validate(const nlohmann::json& value, const std::string& definition) const {
    std::vector<std::string> errors;
    check(value, root_.at("definitions").at(definition), "$", errors);
    return errors;
  }

 private:
  static bool has_type(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    return false;
  }

  const nlohmann::json& resolve(const nlohmann::json& schema) const {
    if (!schema.contains("$ref")) return schema;
    const auto ref = schema["$ref"].get<std::string>();
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) throw Error("unsupported $ref " + ref);
    return root_.at("definitions").at(ref.substr(prefix.size()));
  }

  void check(const nlohmann::json& v, const nlohmann::json& raw, const std::string& at,
             std::vector<std::string>& errors) const {
    const auto& s = resolve(raw);
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
      } else {
        ok = has_type(v, s["type"].get<std::string>());
      }
      if (!ok) {
        errors.push_back(at + ": expected type " + s["type"].dump() + ", got " + v.dump());
        return;
      }
    }
    if (s.contains("enum")) {
      bool ok = false;
      for (const auto& e : s["enum"]) ok = ok || e == v;
      if (!ok) errors.push_back(at + ": value " + v.dump() + " not in enum");
    }
    if (s.contains("minimum") && v.is_number() && v.get<double>() < s["minimum"].get<double>())
      errors.push_back(at + ": below minimum");
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& key : s["required"])
          if (!v.contains(key.get<std::string>())) errors.push_back(at + ": missing " + key.get<std::string>());
      const bool closed = s.contains("additionalProperties") && s["additionalProperties"] == false;
      for (const auto& [key, child] : v.items()) {
        if (s.contains("properties") && s["properties"].contains(key))
          check(child, s["properties"][key], at + "." + key, errors);
        else if (closed)
          errors.push_back(at + ": unexpected property " + key);
      }
    }
    if (v.is_array() && s.contains("items"))
      for (std::size_t k = 0; k < v.size(); ++k) check(v[k], s["items"], at + "[" + std::to_string(k) + "]", errors);
  }

  nlohmann::json root_;
};

}  // namespace avlem::testing
