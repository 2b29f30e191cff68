#pragma once

#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace micl {

// Thrown when tensor extents or sequence layouts do not line up.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Thrown when a documented operation precondition is violated.
class PreconditionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Thrown on malformed configuration or unusable input files.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Thrown when a computation produces non-finite values (e.g. diverged training).
class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Process exit codes used by the CLI.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfigError = 2,
    kExitPrecondition = 3,
    kExitNumerical = 4,
    kExitVerificationFailed = 5,
};

inline std::string shape_string(std::span<const std::size_t> shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// FNV-1a over raw bytes; used for content checksums in tests and result records.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(std::span<const double> v, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(v.data(), v.size() * sizeof(double), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace micl
