#include "mtaesth/kvfile.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mtaesth/errors.hpp"

namespace mtaesth {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvFile KvFile::parse_text(const std::string& text, const std::string& origin) {
  KvFile f;
  f.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw config_error(origin + ":" + std::to_string(lineno) +
                         ": expected key=value, got '" + t + "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    if (f.kv_.count(key)) {
      throw config_error(origin + ":" + std::to_string(lineno) +
                         ": duplicate key '" + key + "'");
    }
    f.kv_[key] = value;
  }
  return f;
}

KvFile KvFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

void KvFile::set(const std::string& key, const std::string& value) {
  kv_[key] = value;
}

bool KvFile::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string KvFile::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) {
    throw config_error(origin_ + ": missing required key '" + key + "'");
  }
  return it->second;
}

std::string KvFile::get_or(const std::string& key,
                           const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double KvFile::get_double(const std::string& key) const {
  const std::string v = get(key);
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') {
    throw config_error(origin_ + ": key '" + key + "' is not a number: '" + v +
                       "'");
  }
  return x;
}

double KvFile::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long KvFile::get_int(const std::string& key) const {
  const std::string v = get(key);
  char* end = nullptr;
  long x = std::strtol(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') {
    throw config_error(origin_ + ": key '" + key + "' is not an integer: '" +
                       v + "'");
  }
  return x;
}

long KvFile::get_int_or(const std::string& key, long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

bool KvFile::get_bool_or(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw config_error(origin_ + ": key '" + key + "' is not a boolean: '" + v +
                     "'");
}

std::vector<double> KvFile::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& tok : split_csv_list(get(key))) {
    char* end = nullptr;
    double x = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') {
      throw config_error(origin_ + ": key '" + key +
                         "' has a non-numeric item: '" + tok + "'");
    }
    out.push_back(x);
  }
  return out;
}

std::vector<long> KvFile::get_ints(const std::string& key) const {
  std::vector<long> out;
  for (const std::string& tok : split_csv_list(get(key))) {
    char* end = nullptr;
    long x = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0') {
      throw config_error(origin_ + ": key '" + key +
                         "' has a non-integer item: '" + tok + "'");
    }
    out.push_back(x);
  }
  return out;
}

std::vector<std::string> KvFile::get_strings(const std::string& key) const {
  return split_csv_list(get(key));
}

void KvFile::require_known_keys(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : kv_) {
    if (!allowed.count(k)) {
      throw config_error(origin_ + ": unknown key '" + k + "'");
    }
  }
}

std::string KvFile::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
  return out.str();
}

void KvFile::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write '" + path + "'");
  out << serialize();
}

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

}  // namespace mtaesth
