#pragma once

#include <cstdio>
#include <cstring>
#include <string>

#include "qattn/tensor.hpp"

namespace qattn {

// Checkpoint layout (little-endian, in parameter registration order):
//   magic   "QATTNCK1" (8 bytes)
//   u32     parameter count
//   per parameter:
//     u32   name length, then name bytes (no terminator)
//     u8    scalar width in bytes (4 = float, 8 = double)
//     u32   rank, then u64 extents
//     raw   row-major values
// Values round-trip bit-exactly.

namespace detail {
constexpr char kCkptMagic[8] = {'Q', 'A', 'T', 'T', 'N', 'C', 'K', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

inline void write_all(std::FILE* f, const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) throw InputError("checkpoint: short write");
}
inline void read_all(std::FILE* f, void* p, size_t n) {
    if (std::fread(p, 1, n, f) != n) throw InputError("checkpoint: truncated file");
}
}  // namespace detail

template <typename T>
inline void save_checkpoint(const std::string& path, const ParamRefs<T>& params) {
    detail::FileHandle f(std::fopen(path.c_str(), "wb"));
    if (!f) throw InputError("checkpoint: cannot open " + path + " for writing");
    detail::write_all(f.get(), detail::kCkptMagic, 8);
    uint32_t count = static_cast<uint32_t>(params.size());
    detail::write_all(f.get(), &count, 4);
    for (const auto* p : params) {
        uint32_t name_len = static_cast<uint32_t>(p->name.size());
        detail::write_all(f.get(), &name_len, 4);
        detail::write_all(f.get(), p->name.data(), name_len);
        uint8_t width = sizeof(T);
        detail::write_all(f.get(), &width, 1);
        uint32_t rank = static_cast<uint32_t>(p->value.shape().size());
        detail::write_all(f.get(), &rank, 4);
        for (int64_t d : p->value.shape()) {
            uint64_t e = static_cast<uint64_t>(d);
            detail::write_all(f.get(), &e, 8);
        }
        detail::write_all(f.get(), p->value.data(), sizeof(T) * p->value.numel());
    }
}

/// Restore parameter values in place. Names and shapes must match the
/// checkpoint exactly, in order.
template <typename T>
inline void load_checkpoint(const std::string& path, const ParamRefs<T>& params) {
    detail::FileHandle f(std::fopen(path.c_str(), "rb"));
    if (!f) throw InputError("checkpoint: cannot open " + path);
    char magic[8];
    detail::read_all(f.get(), magic, 8);
    if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw InputError("checkpoint: bad magic in " + path);
    uint32_t count = 0;
    detail::read_all(f.get(), &count, 4);
    if (count != params.size())
        throw ConfigError("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                          std::to_string(params.size()));
    for (auto* p : params) {
        uint32_t name_len = 0;
        detail::read_all(f.get(), &name_len, 4);
        std::string name(name_len, '\0');
        detail::read_all(f.get(), name.data(), name_len);
        if (name != p->name)
            throw ConfigError("checkpoint: expected parameter '" + p->name + "', found '" + name +
                              "'");
        uint8_t width = 0;
        detail::read_all(f.get(), &width, 1);
        if (width != sizeof(T))
            throw ConfigError("checkpoint: scalar width " + std::to_string(width) +
                              " does not match model width " + std::to_string(sizeof(T)));
        uint32_t rank = 0;
        detail::read_all(f.get(), &rank, 4);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) {
            uint64_t e = 0;
            detail::read_all(f.get(), &e, 8);
            shape[i] = static_cast<int64_t>(e);
        }
        if (shape != p->value.shape())
            throw ConfigError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(p->value.shape()));
        detail::read_all(f.get(), p->value.data(), sizeof(T) * p->value.numel());
    }
}

}  // namespace qattn
