#pragma once

// Parameter checkpoint format (little-endian):
//
//   magic   "HKSLCKPT"            8 bytes
//   version u32                   currently 1
//   count   u32                   number of records
//   record  * count:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64 * rank
//     data     f64 * prod(dims), IEEE-754 binary64
//
// Records are written in the order given, so a checkpoint is byte-identical for identical parameters.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/tensor.hpp"

namespace hksl {

struct NamedTensor {
    std::string name;
    Tensor value;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

template <class T>
T take(const std::string& buf, std::size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'H', 'K', 'S', 'L', 'C', 'K', 'P', 'T'};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& records) {
    std::string buf(kCheckpointMagic, 8);
    detail::put<std::uint32_t>(buf, 1);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(r.name.size()));
        buf += r.name;
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(r.value.rank()));
        for (auto d : r.value.shape()) detail::put<std::uint64_t>(buf, d);
        for (double v : r.value.data()) detail::put<double>(buf, v);
    }
    return buf;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& buf) {
    if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file");
    std::size_t pos = 8;
    if (detail::take<std::uint32_t>(buf, pos) != 1) throw std::runtime_error("unsupported checkpoint version");
    const auto count = detail::take<std::uint32_t>(buf, pos);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::take<std::uint32_t>(buf, pos);
        if (pos + len > buf.size()) throw std::runtime_error("checkpoint truncated");
        std::string name = buf.substr(pos, len);
        pos += len;
        const auto rank = detail::take<std::uint32_t>(buf, pos);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::take<std::uint64_t>(buf, pos));
        Tensor t(shape);
        for (double& v : t.data()) v = detail::take<double>(buf, pos);
        out.push_back({std::move(name), std::move(t)});
    }
    if (pos != buf.size()) throw std::runtime_error("trailing bytes after checkpoint records");
    return out;
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
    write_file_atomic(path, encode_checkpoint(records));
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

}  // namespace hksl
