#pragma once

#include <charconv>
#include <string>

namespace lorablend {

// Shortest representation that parses back to the same double.
inline std::string format_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, end);
}

} // namespace lorablend
