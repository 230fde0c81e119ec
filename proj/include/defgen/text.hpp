#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace defgen::text {

// ASCII-only lowercase; other bytes pass through unchanged.
std::string fold(std::string_view s);

bool is_valid_utf8(std::string_view s);
// Length in bytes of the UTF-8 sequence starting at s[pos], or 0 if invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t pos);
// Code points in a valid UTF-8 string; invalid bytes count one each.
std::size_t codepoint_count(std::string_view s);

std::vector<std::string> split_whitespace(std::string_view s);
std::string trim(std::string_view s);

bool is_ascii_alpha(unsigned char c);
bool is_ascii_digit(unsigned char c);
bool is_ascii_punct(unsigned char c);

// Number of length units: whitespace tokens when the text contains an ASCII
// space, code points otherwise (scripts written without spaces).
std::size_t length_units(std::string_view s);

}  // namespace defgen::text
