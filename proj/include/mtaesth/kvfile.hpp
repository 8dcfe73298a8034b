#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace mtaesth {

/// Flat key=value text file. Lines are `key = value`, blank lines and
/// `#` comments allowed. Keys are unique; later duplicates are rejected.
class KvFile {
 public:
  KvFile() = default;

  static KvFile parse_text(const std::string& text, const std::string& origin);
  static KvFile load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  long get_int(const std::string& key) const;
  long get_int_or(const std::string& key, long fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<long> get_ints(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

  /// Rejects any key outside `allowed` with a config_error naming it.
  void require_known_keys(const std::set<std::string>& allowed) const;

  std::string serialize() const;
  void save(const std::string& path) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
  std::string origin_ = "<memory>";
};

std::vector<std::string> split_csv_list(const std::string& s);

}  // namespace mtaesth
