#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gfnem/params.hpp"

namespace gfnem {

// Checkpoint file: 8-byte magic, u32 format version, u64 FNV-1a checksum of
// the payload, u32 block count, then per block a name, shape, and raw
// little-endian f64 values. Loading verifies magic, version, and checksum.

namespace detail {

inline uint64_t fnv1a(const std::vector<unsigned char>& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

template <class T>
void put(std::vector<unsigned char>& out, const T& v) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T take(const std::vector<unsigned char>& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw std::runtime_error("checkpoint: truncated file");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'G', 'F', 'N', 'E', 'M', 'C', 'K', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParamStore& store, const std::string& path) {
    std::vector<unsigned char> payload;
    detail::put<uint32_t>(payload, static_cast<uint32_t>(store.num_blocks()));
    for (size_t i = 0; i < store.num_blocks(); ++i) {
        const ParamBlock& b = store.block(static_cast<int>(i));
        detail::put<uint32_t>(payload, static_cast<uint32_t>(b.name.size()));
        payload.insert(payload.end(), b.name.begin(), b.name.end());
        detail::put<uint32_t>(payload, static_cast<uint32_t>(b.value.shape.size()));
        for (int64_t d : b.value.shape) detail::put<int64_t>(payload, d);
        for (double v : b.value.values) detail::put<double>(payload, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(kCheckpointMagic, 8);
    uint32_t version = kCheckpointVersion;
    uint64_t checksum = detail::fnv1a(payload);
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&checksum), sizeof checksum);
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Loads blocks into the store: existing blocks are overwritten (shape must
// match), unseen blocks are created.
inline void load_checkpoint(ParamStore& store, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = 0;
    uint64_t checksum = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof version);
    f.read(reinterpret_cast<char*>(&checksum), sizeof checksum);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    std::vector<unsigned char> payload(std::istreambuf_iterator<char>(f), {});
    if (detail::fnv1a(payload) != checksum)
        throw std::runtime_error("checkpoint: checksum mismatch in " + path);

    size_t off = 0;
    uint32_t nblocks = detail::take<uint32_t>(payload, off);
    for (uint32_t i = 0; i < nblocks; ++i) {
        uint32_t name_len = detail::take<uint32_t>(payload, off);
        if (off + name_len > payload.size()) throw std::runtime_error("checkpoint: truncated name");
        std::string name(reinterpret_cast<const char*>(payload.data() + off), name_len);
        off += name_len;
        uint32_t rank = detail::take<uint32_t>(payload, off);
        std::vector<int64_t> shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = detail::take<int64_t>(payload, off);
        Tensor t(shape);
        for (auto& v : t.values) v = detail::take<double>(payload, off);
        if (store.has(name)) {
            ParamBlock& b = store.block(name);
            if (b.value.shape != t.shape)
                throw std::runtime_error("checkpoint: shape mismatch for block " + name);
            b.value = std::move(t);
        } else {
            store.add(name, std::move(t));
        }
    }
}

}  // namespace gfnem
