#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dynpen {

/// Flat `key = value` configuration text. Keys use dotted sections
/// (`penalty.mu_min`), `#` starts a comment, blank lines are ignored.
/// Entries are kept sorted so an echoed file is deterministic.
class KeyValueConfig {
public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(line_no) +
                                 ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
      cfg.entries_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void set(const std::string& key, double value) { entries_[key] = format_double(value); }
  void set(const std::string& key, int value) { entries_[key] = std::to_string(value); }
  void set(const std::string& key, std::size_t value) { entries_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { entries_[key] = value ? "true" : "false"; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': not a number: " + it->second);
    }
  }

  long get_int(const std::string& key, long fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const long v = std::stol(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::runtime_error("config key '" + key + "': not a boolean: " + v);
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
    return os.str();
  }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write config file: " + path.string());
    os << to_string();
  }

  /// Round-trip exact double formatting, shared by the CSV writers.
  static std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::string> entries_;
};

}  // namespace dynpen
