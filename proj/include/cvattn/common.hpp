#pragma once

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvattn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline constexpr double kPi = 3.14159265358979323846;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension/extent violations; message names the offending dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf detected after a primitive, or a domain violation (log of <= 0).
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Raised by mask metrics that are undefined on empty masks; callers that
/// aggregate (evaluate) catch this type specifically and report the count.
class EmptyMaskError : public Error {
public:
    using Error::Error;
};

inline Index numel_of(const Shape& shape) {
    Index n = 1;
    for (Index e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

// Row-major strides; rightmost dimension is contiguous.
inline std::vector<Index> strides_of(const Shape& shape) {
    std::vector<Index> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * shape[i + 1];
    }
    return st;
}

/// Writes via a sibling temp file and renames into place, so readers never
/// observe a partial file. writer receives the temp path.
template <typename Fn>
void atomic_write(const std::string& path, Fn&& writer) {
    const std::string tmp = path + ".tmp";
    writer(tmp);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed for " + path + ": " + ec.message());
}

}  // namespace cvattn
