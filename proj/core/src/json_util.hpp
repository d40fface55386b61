#pragma once

// Internal helpers shared by the JSON readers and writers.

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hessdiag/error.hpp"
#include "hessdiag/models.hpp"

namespace hessdiag::detail {

using nlohmann::json;

// Typed access with dotted-path error messages. Tracks which keys were read
// so leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path, std::string source)
      : j_(j), path_(std::move(path)), source_(std::move(source)) {
    if (!j_.is_object()) fail(path_.empty() ? "top level must be an object" : "field '" + path_ + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) fail_field(key, "is required");
    return j_.at(key);
  }

  Fields object(const std::string& key) { return Fields(raw(key), join(key), source_); }

  std::int64_t integer(const std::string& key) {
    const json& v = raw(key);
    if (v.is_number_integer() || v.is_number_unsigned()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::floor(d) == d && std::abs(d) < 9e15) return static_cast<std::int64_t>(d);
    }
    fail_field(key, "must be an integer");
  }
  int int32(const std::string& key) {
    const auto v = integer(key);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) fail_field(key, "is out of range");
    return static_cast<int>(v);
  }
  std::uint64_t seed(const std::string& key) {
    const json& v = raw(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    fail_field(key, "must be a nonnegative integer");
  }
  double number(const std::string& key) {
    const json& v = raw(key);
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!v.is_number()) fail_field(key, "must be a number");
    return v.get<double>();
  }
  bool boolean(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_boolean()) fail_field(key, "must be true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) fail_field(key, "must be a string");
    return v.get<std::string>();
  }
  std::vector<std::string> strings(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail_field(key, "must be an array of strings");
    std::vector<std::string> out;
    for (const auto& x : v) {
      if (!x.is_string()) fail_field(key, "must be an array of strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  }
  std::vector<double> numbers(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail_field(key, "must be an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (x.is_null()) {
        out.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      if (!x.is_number()) fail_field(key, "must be an array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

  // Rejects keys that were never read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail("unknown field '" + join(it.key()) + "'");
    }
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[noreturn]] void fail_field(const std::string& key, const std::string& what) const {
    fail("field '" + join(key) + "' " + what);
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(source_ + ": " + what);
  }
  const json& value() const { return j_; }

 private:
  const json& j_;
  std::string path_;
  std::string source_;
  std::set<std::string> seen_;
};

// NaN and infinities become null; JSON has no spelling for them.
inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const ModelConfig& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["vocab_size"] = c.vocab_size;
  j["embed_dim"] = c.embed_dim;
  j["heads"] = c.heads;
  j["classes"] = c.classes;
  j["seq_len"] = c.seq_len;
  j["sents_per_doc"] = c.sents_per_doc;
  j["words_per_sent"] = c.words_per_sent;
  j["init_seed"] = c.init_seed;
  return j;
}

// Parse error with 1-based line and column of the offending byte.
inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error");
  }
}

}  // namespace hessdiag::detail
