#pragma once

// Little-endian packing helpers shared by the volume and weight file formats.

#include "cnrf/common.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string_view>
#include <vector>

namespace cnrf::detail {

class ByteWriter {
public:
    void bytes(const void* p, size_t n)
    {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void u8(uint8_t v) { buf_.push_back(v); }
    void u32(uint32_t v)
    {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v)
    {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }

    const std::vector<uint8_t>& buffer() const { return buf_; }
    std::vector<uint8_t>& buffer() { return buf_; }

private:
    std::vector<uint8_t> buf_;
};

/// Bounds-checked reader; every read names the field it is decoding so that
/// truncation errors say what was missing.
class ByteReader {
public:
    explicit ByteReader(const std::vector<uint8_t>& buf) : buf_(buf) {}

    size_t remaining() const { return buf_.size() - pos_; }
    size_t position() const { return pos_; }

    void require(size_t n, const std::string& field) const
    {
        if (remaining() < n)
            throw FormatError(FormatErrorKind::Truncated, field,
                              "file truncated: need " + std::to_string(n) + " bytes, have " +
                                  std::to_string(remaining()));
    }
    bool magic_matches(std::string_view m)
    {
        if (remaining() < m.size()) return false;
        bool ok = std::memcmp(buf_.data() + pos_, m.data(), m.size()) == 0;
        if (ok) pos_ += m.size();
        return ok;
    }
    uint8_t u8(const std::string& field)
    {
        require(1, field);
        return buf_[pos_++];
    }
    uint32_t u32(const std::string& field)
    {
        require(4, field);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64(const std::string& field)
    {
        require(8, field);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }
    const uint8_t* take(size_t n, const std::string& field)
    {
        require(n, field);
        const uint8_t* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

private:
    const std::vector<uint8_t>& buf_;
    size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace cnrf::detail
