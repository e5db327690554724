#pragma once

// Binary checkpoint format, little-endian throughout:
//   "SBDN" | u32 version = 1 | u32 tensor count |
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//               float32 values in row-major order.

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sbd/common.hpp"
#include "sbd/model.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

inline constexpr char kCheckpointMagic[4] = {'S', 'B', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;

    friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

using Checkpoint = std::vector<NamedArray>;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
    static_assert(std::is_unsigned_v<U>);
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw InputError("checkpoint: truncated file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    os.write(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.size()));
    for (const auto& t : ckpt) {
        if (t.name.size() > 0xFFFF) throw InputError("checkpoint: tensor name too long");
        if (t.shape.size() > 0xFF) throw InputError("checkpoint: tensor rank too large");
        if (numel_of(t.shape) != t.values.size()) throw ShapeError("checkpoint: '" + t.name + "' shape/value mismatch");
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
        for (const auto d : t.shape) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (const float v : t.values) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw InputError("checkpoint: bad magic");
    }
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw InputError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(is);
    Checkpoint ckpt;
    ckpt.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray t;
        const auto name_len = detail::get_le<std::uint16_t>(is);
        t.name.resize(name_len);
        if (!is.read(t.name.data(), name_len)) throw InputError("checkpoint: truncated file");
        const auto rank = detail::get_le<std::uint8_t>(is);
        for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(detail::get_le<std::uint32_t>(is));
        t.values.resize(numel_of(t.shape));
        for (auto& v : t.values) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
        ckpt.push_back(std::move(t));
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot write " + path);
    write_checkpoint(os, ckpt);
    os.flush();
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot read " + path);
    return read_checkpoint(is);
}

template <typename T>
Checkpoint snapshot(const SbdModel<T>& model) {
    Checkpoint ckpt;
    for (const auto& p : model.parameters()) {
        NamedArray a{p.name, p.tensor.shape(), {}};
        a.values.reserve(p.tensor.numel());
        for (const T v : p.tensor.data()) a.values.push_back(static_cast<float>(v));
        ckpt.push_back(std::move(a));
    }
    return ckpt;
}

// Copies values into the model; names and shapes must match exactly.
template <typename T>
void restore(SbdModel<T>& model, const Checkpoint& ckpt) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : ckpt) by_name[a.name] = &a;
    if (by_name.size() != model.parameters().size()) {
        throw InputError("checkpoint: holds " + std::to_string(by_name.size()) + " tensors, model has " +
                         std::to_string(model.parameters().size()));
    }
    for (auto& p : model.parameters()) {
        const auto it = by_name.find(p.name);
        if (it == by_name.end()) throw InputError("checkpoint: missing tensor '" + p.name + "'");
        if (it->second->shape != p.tensor.shape()) {
            throw InputError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(it->second->shape) +
                             ", model expects " + shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
    }
}

}  // namespace sbd
