#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "flsim/error.hpp"
#include "flsim/model.hpp"
#include "flsim/rng.hpp"
#include "flsim/tensor.hpp"

namespace flsim {

// FLPK container, little-endian:
//   magic "FLPK", version u16 = 1, partition_tag u8, element_type u8
//   (0 = f32, 1 = f64), tensor_count u32; per tensor: name_len u16, name
//   bytes (UTF-8), rank u8, extents u32 * rank, row-major payload; the file
//   ends with an FNV-1a-32 checksum of all preceding bytes.

inline constexpr std::uint16_t kFlpkVersion = 1;

template <typename T>
constexpr std::uint8_t element_type_byte() {
    return std::is_same_v<T, float> ? 0 : 1;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t len) : data_(data), len_(len) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return len_ - pos_; }

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > len_) {
            throw CorruptFileError(std::string("truncated file while reading ") + what, pos_);
        }
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return data_[pos_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(data_[pos_]) |
                          static_cast<std::uint16_t>(data_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    const std::uint8_t* bytes(std::size_t n, const char* what) {
        need(n, what);
        const std::uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }

private:
    const std::uint8_t* data_;
    std::size_t len_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Exact size in bytes of serialize(pset)'s output; also the wire cost of one
/// transfer of this set.
template <typename T>
std::size_t serialized_size(const ParamSet<T>& pset) {
    std::size_t n = 4 + 2 + 1 + 1 + 4;  // header
    for (const auto& e : pset.entries) {
        n += 2 + e.name.size() + 1 + 4 * e.tensor.rank() + sizeof(T) * e.tensor.size();
    }
    return n + 4;  // checksum
}

template <typename T>
std::vector<std::uint8_t> serialize(const ParamSet<T>& pset) {
    std::vector<std::uint8_t> out;
    out.reserve(serialized_size(pset));
    out.insert(out.end(), {'F', 'L', 'P', 'K'});
    detail::put_u16(out, kFlpkVersion);
    out.push_back(static_cast<std::uint8_t>(pset.tag));
    out.push_back(element_type_byte<T>());
    detail::put_u32(out, static_cast<std::uint32_t>(pset.entries.size()));
    for (const auto& e : pset.entries) {
        if (e.name.size() > 0xffff) throw ConfigError("tensor name too long: " + e.name);
        detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        if (e.tensor.rank() > 0xff) throw ConfigError("tensor rank too large");
        out.push_back(static_cast<std::uint8_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.dims()) {
            detail::put_u32(out, static_cast<std::uint32_t>(d));
        }
        const std::size_t payload = e.tensor.size() * sizeof(T);
        const std::size_t at = out.size();
        out.resize(at + payload);
        std::memcpy(out.data() + at, e.tensor.data(), payload);
    }
    detail::put_u32(out, fnv1a32(out.data(), out.size()));
    return out;
}

/// Partition tag stored in a serialized blob (validates magic and version).
inline PartitionTag peek_partition_tag(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes.data(), bytes.size());
    const std::uint8_t* magic = r.bytes(4, "magic");
    if (std::memcmp(magic, "FLPK", 4) != 0) throw CorruptFileError("bad magic", 0);
    r.u16("version");
    std::uint8_t tag = r.u8("partition_tag");
    if (tag > 3) throw CorruptFileError("unknown partition tag", 6);
    return static_cast<PartitionTag>(tag);
}

/// Element type byte stored in a serialized blob.
inline std::uint8_t peek_element_type(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes.data(), bytes.size());
    const std::uint8_t* magic = r.bytes(4, "magic");
    if (std::memcmp(magic, "FLPK", 4) != 0) throw CorruptFileError("bad magic", 0);
    r.u16("version");
    r.u8("partition_tag");
    return r.u8("element_type");
}

template <typename T>
ParamSet<T> deserialize(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes.data(), bytes.size());
    const std::uint8_t* magic = r.bytes(4, "magic");
    if (std::memcmp(magic, "FLPK", 4) != 0) throw CorruptFileError("bad magic", 0);
    const std::uint16_t version = r.u16("version");
    if (version != kFlpkVersion) {
        throw CorruptFileError("unsupported version " + std::to_string(version), 4);
    }

    if (bytes.size() < 4) throw CorruptFileError("file too short for checksum", bytes.size());
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    const std::uint32_t computed = fnv1a32(bytes.data(), body);
    if (stored != computed) throw CorruptFileError("checksum mismatch", body);

    const std::uint8_t tag = r.u8("partition_tag");
    if (tag > 3) throw CorruptFileError("unknown partition tag", r.offset() - 1);
    const std::uint8_t etype = r.u8("element_type");
    if (etype != element_type_byte<T>()) {
        throw CorruptFileError("element type " + std::to_string(etype) +
                                   " does not match the requested width",
                               r.offset() - 1);
    }
    const std::uint32_t count = r.u32("tensor_count");

    ParamSet<T> pset;
    pset.tag = static_cast<PartitionTag>(tag);
    pset.entries.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint16_t name_len = r.u16("name length");
        const std::uint8_t* name_bytes = r.bytes(name_len, "name");
        std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
        const std::uint8_t rank = r.u8("rank");
        if (rank == 0) throw CorruptFileError("tensor '" + name + "' has rank 0", r.offset() - 1);
        std::vector<std::size_t> dims(rank);
        std::size_t total = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            dims[d] = r.u32("extent");
            if (dims[d] == 0) {
                throw CorruptFileError("tensor '" + name + "' has a zero extent", r.offset() - 4);
            }
            total *= dims[d];
        }
        const std::size_t payload_at = r.offset();
        if (r.remaining() < total * sizeof(T) + 4) {
            throw CorruptFileError("tensor '" + name + "' payload length inconsistent with extents",
                                   payload_at);
        }
        const std::uint8_t* payload = r.bytes(total * sizeof(T), "payload");
        std::vector<T> data(total);
        std::memcpy(data.data(), payload, total * sizeof(T));
        pset.entries.push_back({std::move(name), Tensor<T>::from_data(std::move(dims), std::move(data))});
    }
    if (r.remaining() != 4) {
        throw CorruptFileError("trailing bytes after last tensor", r.offset());
    }
    return pset;
}

inline void write_bytes_file(const std::filesystem::path& path,
                             const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_bytes_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw MissingStateError("cannot open '" + path.string() + "'");
    const std::streamsize len = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
    in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw Error("failed reading '" + path.string() + "'");
    return bytes;
}

}  // namespace flsim
