#pragma once

// Flat key=value run configuration: every key has a documented default,
// unknown keys are rejected, and the fully-resolved document has a stable
// textual form whose hash identifies the run.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gtc/common.hpp"

namespace gtc {

class Config {
 public:
  // Starts from the built-in defaults.
  Config();

  // Parse `key = value` lines ('#' starts a comment, blank lines ignored).
  // Later assignments override earlier ones. Unknown keys throw ConfigError.
  void apply_text(const std::string& text, const std::string& origin);
  void apply_file(const std::string& path);
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  double num(const std::string& key) const;
  int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;  // 0/1, true/false, on/off

  bool has(const std::string& key) const;

  // Canonical resolved form: "key=value\n" sorted by key.
  std::string resolved_text() const;
  // FNV-1a 64-bit hash of resolved_text(), rendered as 16 hex digits.
  std::string hash() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  // Cross-field validation (enum values, positivity). Throws ConfigError.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

uint64_t fnv1a64(const std::string& text);

}  // namespace gtc
