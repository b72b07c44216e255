#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "uapdet/error.hpp"
#include "uapdet/tensor.hpp"

namespace uapdet {

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(f.tellg());
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(size);
    if (size) f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!f) throw FormatError("failed reading " + std::to_string(size) + " bytes from " + path);
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot create file: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing " + path);
}

inline bool looks_gzipped(const std::vector<uint8_t>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<uint8_t> gunzip(const std::vector<uint8_t>& in) {
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit2(&zs, 15 + 32) != Z_OK)  // +32: accept gzip or zlib headers
        throw FormatError("zlib: inflateInit failed");
    std::vector<uint8_t> out;
    out.reserve(in.size() * 4);
    std::array<uint8_t, 1 << 16> buf;
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("zlib: corrupt gzip stream (code " + std::to_string(rc) + ")");
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

// Reads a file, transparently decompressing gzip content.
inline std::vector<uint8_t> read_maybe_gzipped(const std::string& path) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    return looks_gzipped(bytes) ? gunzip(bytes) : bytes;
}

// --- little-endian scalar framing for the binary artifact formats ---

class ByteWriter {
public:
    void u8(uint8_t v) { bytes_.push_back(v); }
    void u16(uint16_t v) { le(&v, 2); }
    void u32(uint32_t v) { le(&v, 4); }
    void u64(uint64_t v) { le(&v, 8); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<uint32_t>(t.rank()));
        for (size_t i = 0; i < t.rank(); ++i) u32(static_cast<uint32_t>(t.shape()[i]));
        f32_array(t.data(), static_cast<size_t>(t.numel()));
    }
    void f32_array(const float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) f32(p[i]);
    }
    const std::vector<uint8_t>& bytes() const { return bytes_; }

private:
    std::vector<uint8_t> bytes_;

    void le(const void* p, size_t n) {
        uint64_t v = 0;
        std::memcpy(&v, p, n);
        for (size_t i = 0; i < n; ++i) bytes_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
};

class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, std::string source = "")
        : data_(data), size_(size), source_(std::move(source)) {}
    explicit ByteReader(const std::vector<uint8_t>& bytes, std::string source = "")
        : ByteReader(bytes.data(), bytes.size(), std::move(source)) {}

    size_t offset() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }

    uint8_t u8() { return take(1)[0]; }
    uint16_t u16() { return static_cast<uint16_t>(le(2)); }
    uint32_t u32() { return static_cast<uint32_t>(le(4)); }
    uint64_t u64() { return le(8); }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        const uint8_t* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    Tensor tensor() {
        const uint32_t rank = u32();
        if (rank > 8) fail("implausible tensor rank " + std::to_string(rank));
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = u32();
        const int64_t n = shape_numel(shape);
        Tensor t(shape);
        for (int64_t i = 0; i < n; ++i) t[i] = f32();
        return t;
    }
    void expect_magic(const char magic[4]) {
        const uint8_t* p = take(4);
        if (std::memcmp(p, magic, 4) != 0)
            fail(std::string("bad magic, expected \"") + std::string(magic, 4) + "\"");
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError((source_.empty() ? std::string("<memory>") : source_) + ": " + what +
                          " at offset " + std::to_string(pos_));
    }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    std::string source_;

    const uint8_t* take(size_t n) {
        if (pos_ + n > size_) fail("truncated, needed " + std::to_string(n) + " more bytes");
        const uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    uint64_t le(size_t n) {
        const uint8_t* p = take(n);
        uint64_t v = 0;
        for (size_t i = 0; i < n; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
        return v;
    }
};

// FNV-1a, used to fingerprint input files in run manifests and baselines.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64_file(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace uapdet
