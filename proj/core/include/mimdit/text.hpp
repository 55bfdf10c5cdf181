#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mimdit {

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);
double parse_double(std::string_view text);
std::uint64_t parse_u64(std::string_view text);

std::string_view trim(std::string_view text);
std::vector<std::string> split_list(std::string_view text, char separator);

}  // namespace mimdit
