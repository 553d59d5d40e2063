#pragma once

// Human-editable `key = value` configuration text with optional `[section]`
// headers. Keys inside a section are flattened to `section.key`.

#include "rehabridge/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rehabridge::kv {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

class Document {
 public:
  using Entry = std::pair<std::string, std::string>;

  static Document parse(std::string_view text) {
    Document doc;
    std::istringstream in{std::string(text)};
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto content = detail::trim(line);
      if (content.empty() || content[0] == '#' || content[0] == ';') {
        continue;
      }
      if (content.front() == '[') {
        if (content.back() != ']') {
          throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": unterminated section");
        }
        section = detail::trim(std::string_view(content).substr(1, content.size() - 2));
        continue;
      }
      const auto eq = content.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected key = value");
      }
      auto key = detail::trim(std::string_view(content).substr(0, eq));
      if (key.empty()) {
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": empty key");
      }
      if (!section.empty()) {
        key = section + "." + key;
      }
      doc.set(key, detail::trim(std::string_view(content).substr(eq + 1)));
    }
    return doc;
  }

  static Document load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
      throw Error(ErrorCode::NotFound, "cannot open config file " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(key, std::move(value));
  }

  bool has(std::string_view key) const { return find(key) != nullptr; }

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) {
        return &v;
      }
    }
    return nullptr;
  }

  std::string get_string(std::string_view key, std::string fallback) const {
    const auto* v = find(key);
    return v ? *v : fallback;
  }

  double get_double(std::string_view key, double fallback) const {
    const auto* v = find(key);
    if (!v) {
      return fallback;
    }
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || ptr != v->data() + v->size() || !std::isfinite(out)) {
      throw Error(ErrorCode::ParseError, "key " + std::string(key) + ": not a number: " + *v);
    }
    return out;
  }

  long long get_int(std::string_view key, long long fallback) const {
    const auto* v = find(key);
    if (!v) {
      return fallback;
    }
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || ptr != v->data() + v->size()) {
      throw Error(ErrorCode::ParseError, "key " + std::string(key) + ": not an integer: " + *v);
    }
    return out;
  }

  bool get_bool(std::string_view key, bool fallback) const {
    const auto* v = find(key);
    if (!v) {
      return fallback;
    }
    if (*v == "1" || *v == "true" || *v == "yes") {
      return true;
    }
    if (*v == "0" || *v == "false" || *v == "no") {
      return false;
    }
    throw Error(ErrorCode::ParseError, "key " + std::string(key) + ": not a boolean: " + *v);
  }

  /// Entries whose key starts with `prefix`, in file order, prefix stripped.
  std::vector<Entry> with_prefix(std::string_view prefix) const {
    std::vector<Entry> out;
    for (const auto& [k, v] : entries_) {
      if (k.size() > prefix.size() && k.compare(0, prefix.size(), prefix) == 0) {
        out.emplace_back(k.substr(prefix.size()), v);
      }
    }
    return out;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
      out += k + " = " + v + "\n";
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace rehabridge::kv
