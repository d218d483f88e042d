#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qattn {

using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor dimensions. Messages always name the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid configuration value (bad rate, mismatched architectures, unknown key).
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed external input (empty frame, unreadable file).
struct InputError : Error {
    using Error::Error;
};

/// API used out of sequence (e.g. stepping a finished episode).
struct ProtocolError : Error {
    using Error::Error;
};

/// Operation cannot run yet (e.g. replay buffer smaller than a batch).
struct NotReadyError : Error {
    using Error::Error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace qattn
