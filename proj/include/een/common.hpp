#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace een {

// Error taxonomy. Subcommands map ConfigError to exit code 1, everything
// else to 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct LatentError : ShapeError {
    using ShapeError::ShapeError;
};
struct TapeError : Error {
    using Error::Error;
};
struct OptimError : Error {
    using Error::Error;
};
struct LifecycleError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct DegenerateBatchError : Error {
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

// FNV-1a, used for parameter checksums and config content hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a(const std::vector<double>& v, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(v.data(), v.size() * sizeof(double), h);
}

std::string hex64(std::uint64_t v);

// Shortest round-trip decimal form of a double, identical across runs. Used
// everywhere a number reaches a file that must be byte-reproducible.
std::string fmt_double(double v);

}  // namespace een
