#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mandarin {

// Single schema version stamped into every artifact this toolchain emits.
inline constexpr int kSchemaVersion = 1;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Non-fatal diagnostics. Callers that care pass a sink; everyone else passes null.
using WarningSink = std::vector<std::string>;

inline void warn(WarningSink* sink, const std::string& msg) {
    if (sink) sink->push_back(msg);
}

// FNV-1a, used to fingerprint artifacts so stale intermediates are detected.
inline std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace mandarin
