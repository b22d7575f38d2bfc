#pragma once

// Binary tensor container.
//
//   offset  size      field
//   0       4         magic "LOOC"
//   4       2         version (u16, currently 1)
//   6       2         dtype (u16: 1 = f64, 2 = u32)
//   8       2         rank (u16)
//   10      2         reserved, zero
//   12      4*rank    dims (u32 each)
//   ...     numel*sz  payload, row-major
//
// All integers and payload values are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "looc/error.hpp"
#include "looc/tensor.hpp"

namespace looc {

enum class DType : std::uint16_t { F64 = 1, U32 = 2 };

inline constexpr std::uint16_t kTensorFileVersion = 1;
inline constexpr std::size_t kTensorFileHeader = 12;

struct U32Array {
    Shape shape;
    std::vector<std::uint32_t> data;
};

namespace detail {

inline void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::vector<unsigned char> encode_header(DType dtype, const Shape& shape) {
    std::vector<unsigned char> out{'L', 'O', 'O', 'C'};
    put_le(out, kTensorFileVersion, 2);
    put_le(out, static_cast<std::uint16_t>(dtype), 2);
    put_le(out, shape.size(), 2);
    put_le(out, 0, 2);
    for (std::size_t d : shape) {
        if (d > 0xffffffffULL) throw DimensionError("tensor file dim exceeds u32");
        put_le(out, d, 4);
    }
    return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

struct Decoded {
    DType dtype;
    Shape shape;
    std::size_t payload_offset;
};

inline Decoded decode_header(const std::vector<unsigned char>& b, const std::string& name) {
    if (b.size() < kTensorFileHeader)
        throw FormatError(name + ": truncated header", b.size());
    if (std::memcmp(b.data(), "LOOC", 4) != 0) throw FormatError(name + ": bad magic", 0);
    auto version = get_le(b.data() + 4, 2);
    if (version != kTensorFileVersion)
        throw FormatError(name + ": unsupported version " + std::to_string(version), 4);
    auto dtype = get_le(b.data() + 6, 2);
    if (dtype != 1 && dtype != 2) throw FormatError(name + ": unknown dtype code " + std::to_string(dtype), 6);
    std::size_t rank = get_le(b.data() + 8, 2);
    const std::size_t payload = kTensorFileHeader + 4 * rank;
    if (b.size() < payload) throw FormatError(name + ": truncated dims", b.size());
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i) shape[i] = get_le(b.data() + kTensorFileHeader + 4 * i, 4);
    const std::size_t elem = dtype == 1 ? 8 : 4;
    const std::size_t expected = payload + shape_numel(shape) * elem;
    if (b.size() < expected)
        throw FormatError(name + ": truncated payload, expected " + std::to_string(expected) + " bytes", b.size());
    if (b.size() > expected) throw FormatError(name + ": trailing bytes after payload", expected);
    return Decoded{static_cast<DType>(dtype), std::move(shape), payload};
}

}  // namespace detail

inline std::size_t tensor_file_size(DType dtype, const Shape& shape) {
    return kTensorFileHeader + 4 * shape.size() + shape_numel(shape) * (dtype == DType::F64 ? 8 : 4);
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    auto bytes = detail::encode_header(DType::F64, t.shape());
    bytes.reserve(bytes.size() + 8 * t.numel());
    for (double v : t.data()) detail::put_le(bytes, std::bit_cast<std::uint64_t>(v), 8);
    detail::write_bytes(path, bytes);
}

inline void write_tensor_file(const std::filesystem::path& path, const U32Array& t) {
    if (shape_numel(t.shape) != t.data.size()) throw DimensionError("u32 array shape/data mismatch");
    auto bytes = detail::encode_header(DType::U32, t.shape);
    for (std::uint32_t v : t.data) detail::put_le(bytes, v, 4);
    detail::write_bytes(path, bytes);
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
    auto b = detail::read_bytes(path);
    auto h = detail::decode_header(b, path.string());
    if (h.dtype != DType::F64) throw FormatError(path.string() + ": expected f64 payload", 6);
    std::vector<double> data(shape_numel(h.shape));
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = std::bit_cast<double>(detail::get_le(b.data() + h.payload_offset + 8 * i, 8));
    return Tensor(std::move(h.shape), std::move(data));
}

inline U32Array read_u32_file(const std::filesystem::path& path) {
    auto b = detail::read_bytes(path);
    auto h = detail::decode_header(b, path.string());
    if (h.dtype != DType::U32) throw FormatError(path.string() + ": expected u32 payload", 6);
    U32Array out{h.shape, std::vector<std::uint32_t>(shape_numel(h.shape))};
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<std::uint32_t>(detail::get_le(b.data() + h.payload_offset + 4 * i, 4));
    return out;
}

}  // namespace looc
