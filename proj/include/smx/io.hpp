#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "smx/adam.hpp"
#include "smx/tensor.hpp"

namespace smx {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// All on-disk integers and floats are little-endian regardless of host order.
struct ByteWriter {
    std::vector<uint8_t> bytes;

    void u8(uint8_t v) { bytes.push_back(v); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i64(int64_t v) {
        const auto u = static_cast<uint64_t>(v);
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(u >> (8 * i)));
    }
    void f32(float v) {
        uint32_t u;
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
};

struct ByteReader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;
    std::string what;  // used in error messages

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw IoError(what + ": truncated file");
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v = static_cast<uint16_t>(v | (bytes[pos++] << (8 * i)));
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    int64_t i64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[pos++]) << (8 * i);
        return static_cast<int64_t>(v);
    }
    float f32() {
        const uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    void done() const {
        if (pos != bytes.size()) throw IoError(what + ": trailing bytes after payload");
    }
};

inline std::vector<uint8_t> slurp(const std::string& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(what + ": cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

inline void spill(const std::string& path, const std::vector<uint8_t>& bytes,
                  const std::string& what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(what + ": cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(what + ": short write to '" + path + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Volume files: magic "SMVX", version, dtype code, rank, dims, then row-major
// little-endian payload.

enum class VolDType : uint8_t { F32 = 0, U8 = 1 };

struct Volume {
    VolDType dtype = VolDType::F32;
    std::vector<int64_t> dims;
    std::vector<float> f;    // payload when dtype == F32
    std::vector<uint8_t> u;  // payload when dtype == U8

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

inline constexpr uint16_t kVolumeVersion = 1;
inline constexpr int kMaxVolumeRank = 8;
inline constexpr int64_t kMaxVolumeElems = int64_t(1) << 40;

inline void write_volume(const std::string& path, const Volume& v) {
    if (v.dims.empty() || v.dims.size() > kMaxVolumeRank)
        throw IoError("volume: rank " + std::to_string(v.dims.size()) + " out of range");
    for (int64_t d : v.dims)
        if (d < 1) throw IoError("volume: nonpositive dim");
    const int64_t n = v.numel();
    const size_t have = v.dtype == VolDType::F32 ? v.f.size() : v.u.size();
    if (have != static_cast<size_t>(n)) throw IoError("volume: payload does not match dims");

    detail::ByteWriter w;
    w.raw("SMVX", 4);
    w.u16(kVolumeVersion);
    w.u8(static_cast<uint8_t>(v.dtype));
    w.u8(static_cast<uint8_t>(v.dims.size()));
    for (int64_t d : v.dims) w.i64(d);
    if (v.dtype == VolDType::F32)
        for (float x : v.f) w.f32(x);
    else
        w.raw(v.u.data(), v.u.size());
    detail::spill(path, w.bytes, "volume");
}

inline Volume read_volume(const std::string& path) {
    const auto bytes = detail::slurp(path, "volume");
    detail::ByteReader r{bytes, 0, "volume"};
    r.need(4);
    if (std::memcmp(bytes.data(), "SMVX", 4) != 0) throw IoError("volume: bad magic");
    r.pos = 4;
    const uint16_t version = r.u16();
    if (version != kVolumeVersion)
        throw IoError("volume: unsupported version " + std::to_string(version));
    const uint8_t code = r.u8();
    if (code > 1) throw IoError("volume: unknown dtype code " + std::to_string(code));
    const int rank = r.u8();
    if (rank < 1 || rank > kMaxVolumeRank)
        throw IoError("volume: rank " + std::to_string(rank) + " out of range");
    Volume v;
    v.dtype = static_cast<VolDType>(code);
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
        const int64_t d = r.i64();
        if (d < 1 || n > kMaxVolumeElems / d) throw IoError("volume: dim overflow");
        v.dims.push_back(d);
        n *= d;
    }
    if (v.dtype == VolDType::F32) {
        v.f.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) v.f.push_back(r.f32());
    } else {
        r.need(static_cast<size_t>(n));
        v.u.assign(bytes.begin() + static_cast<int64_t>(r.pos),
                   bytes.begin() + static_cast<int64_t>(r.pos) + n);
        r.pos += static_cast<size_t>(n);
    }
    r.done();
    return v;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "SMCK", version, record count, then per tensor its dotted
// name, shape, and f32 payload. Records follow registration order, so files
// are byte-stable; running statistics are stored alongside the weights.

inline constexpr uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
    detail::ByteWriter w;
    w.raw("SMCK", 4);
    w.u16(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(reg.entries.size()));
    for (const auto& e : reg.entries) {
        if (e.name.size() > 0xffff) throw IoError("checkpoint: tensor name too long");
        w.u16(static_cast<uint16_t>(e.name.size()));
        w.raw(e.name.data(), e.name.size());
        w.u8(static_cast<uint8_t>(e.tensor->rank()));
        for (int64_t d : e.tensor->shape) w.i64(d);
        for (const T x : e.tensor->data) w.f32(static_cast<float>(x));
    }
    detail::spill(path, w.bytes, "checkpoint");
}

template <typename T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
    const auto bytes = detail::slurp(path, "checkpoint");
    detail::ByteReader r{bytes, 0, "checkpoint"};
    r.need(4);
    if (std::memcmp(bytes.data(), "SMCK", 4) != 0) throw IoError("checkpoint: bad magic");
    r.pos = 4;
    const uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();

    struct Record {
        Shape shape;
        std::vector<float> data;
    };
    std::unordered_map<std::string, Record> records;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t len = r.u16();
        r.need(len);
        std::string name(bytes.begin() + static_cast<int64_t>(r.pos),
                         bytes.begin() + static_cast<int64_t>(r.pos) + len);
        r.pos += len;
        const int rank = r.u8();
        if (rank > kMaxVolumeRank) throw IoError("checkpoint: rank out of range for " + name);
        Record rec;
        int64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            const int64_t dim = r.i64();
            if (dim < 1 || n > kMaxVolumeElems / dim)
                throw IoError("checkpoint: dim overflow in " + name);
            rec.shape.push_back(dim);
            n *= dim;
        }
        rec.data.reserve(static_cast<size_t>(n));
        for (int64_t k = 0; k < n; ++k) rec.data.push_back(r.f32());
        if (!records.emplace(std::move(name), std::move(rec)).second)
            throw IoError("checkpoint: duplicate tensor record");
    }
    r.done();

    for (const auto& e : reg.entries) {
        auto it = records.find(e.name);
        if (it == records.end()) throw IoError("checkpoint: missing tensor " + e.name);
        if (it->second.shape != e.tensor->shape)
            throw IoError("checkpoint: shape mismatch for " + e.name + ": file " +
                          shape_str(it->second.shape) + " vs model " + shape_str(e.tensor->shape));
        for (size_t i = 0; i < it->second.data.size(); ++i)
            e.tensor->data[i] = static_cast<T>(it->second.data[i]);
        records.erase(it);
    }
    if (!records.empty())
        throw IoError("checkpoint: unknown tensor " + records.begin()->first +
                      " not present in the model");
}

}  // namespace smx
