#include "defgen/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "defgen/error.hpp"
#include "defgen/io.hpp"
#include "defgen/text.hpp"

namespace defgen {

ConfigMap parse_config(std::string_view content) {
  ConfigMap config;
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string trimmed = text::trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = text::trim(std::string_view(trimmed).substr(0, eq));
    if (key.empty()) throw ParseError("config line " + std::to_string(lineno) + ": empty key");
    config[key] = text::trim(std::string_view(trimmed).substr(eq + 1));
  }
  return config;
}

ConfigMap load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

std::string format_config(const ConfigMap& config) {
  std::string out;
  for (const auto& [key, value] : config) out += key + "=" + value + "\n";
  return out;
}

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ContractError("config key '" + std::string(key) + "': expected " + std::string(expected) + ", got '" +
                      std::string(value) + "'");
}

}  // namespace

std::uint64_t config_u64(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    bad_value(key, value, "a non-negative integer");
  }
  return out;
}

std::size_t config_size(std::string_view key, std::string_view value) {
  return static_cast<std::size_t>(config_u64(key, value));
}

double config_double(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty() || !std::isfinite(out)) {
    bad_value(key, value, "a number");
  }
  return out;
}

bool config_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "true or false");
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

}  // namespace defgen
