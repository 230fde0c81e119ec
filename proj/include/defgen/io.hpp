#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace defgen::io {

// Whole-file read; IoError if the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it over the target, so readers
// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace defgen::io
