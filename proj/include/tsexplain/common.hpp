#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tsexplain {

// Error taxonomy. Everything user-facing maps onto one of these; the CLI
// translates ConfigError to exit code 2 and the rest to 3.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& msg) : std::runtime_error("numerics error: " + msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error("metric error: " + msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

inline constexpr std::uint64_t fnv1a64(const char* s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    while (*s) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*s++));
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.c_str()); }

}  // namespace tsexplain
