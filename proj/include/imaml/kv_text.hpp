#pragma once

// Plain-text `key = value` format with `[section]` headers and `#` comments.
// Shared by the experiment config file and the checkpoint header.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace imaml::kv {

struct Entry {
    std::string section;
    std::string key;
    std::string value;
    std::size_t line = 0;
};

std::vector<Entry> parse(std::string_view text);

using Fields = std::vector<std::pair<std::string, std::string>>;

/// One `[section]` block with its fields in order.
std::string format_section(std::string_view section, const Fields& fields);

std::uint64_t to_u64(std::string_view key, std::string_view value);
double to_double(std::string_view key, std::string_view value);
bool to_bool(std::string_view key, std::string_view value);

/// Shortest text that parses back to the identical double.
std::string from_double(double v);
inline std::string from_bool(bool v) { return v ? "true" : "false"; }

}  // namespace imaml::kv
