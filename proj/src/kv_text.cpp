#include "imaml/kv_text.hpp"

#include <charconv>
#include <cmath>

#include "imaml/error.hpp"

namespace imaml::kv {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

std::vector<Entry> parse(std::string_view text) {
    std::vector<Entry> out;
    std::string section;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                throw Error("line " + std::to_string(line_no) + ": malformed section header '" +
                            std::string(line) + "'");
            }
            section = std::string(trim(line.substr(1, line.size() - 2)));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw Error("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                        std::string(line) + "'");
        }
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw Error("line " + std::to_string(line_no) + ": empty key");
        out.push_back(Entry{section, std::string(key), std::string(trim(line.substr(eq + 1))), line_no});
    }
    return out;
}

std::string format_section(std::string_view section, const Fields& fields) {
    std::string out = "[" + std::string(section) + "]\n";
    for (const auto& [k, v] : fields) out += k + " = " + v + "\n";
    return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view value) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size()) {
        throw Error(std::string(key) + ": expected a non-negative integer, got '" + std::string(value) + "'");
    }
    return v;
}

double to_double(std::string_view key, std::string_view value) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size() || !std::isfinite(v)) {
        throw Error(std::string(key) + ": expected a finite number, got '" + std::string(value) + "'");
    }
    return v;
}

bool to_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw Error(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

std::string from_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace imaml::kv
