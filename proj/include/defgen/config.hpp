#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace defgen {

// Flat key=value settings. Keys mirror the field names of ModelConfig,
// TrainConfig and DecodeConfig, so one file can carry all three.
using ConfigMap = std::map<std::string, std::string>;

// '#' starts a comment; blank lines are ignored; later keys override earlier.
ConfigMap parse_config(std::string_view content);
ConfigMap load_config(const std::filesystem::path& path);
std::string format_config(const ConfigMap& config);

// Value parsers; throw ContractError naming the key on bad input.
std::size_t config_size(std::string_view key, std::string_view value);
std::uint64_t config_u64(std::string_view key, std::string_view value);
double config_double(std::string_view key, std::string_view value);
bool config_bool(std::string_view key, std::string_view value);
// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

}  // namespace defgen
