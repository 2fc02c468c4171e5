#include "volflow/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "RVOL I/O assumes a little-endian host");

namespace volflow {

namespace {

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& off) {
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::string data((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failure: " + path.string());
    return data;
}

void write_all(const std::filesystem::path& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(data.data(), std::streamsize(data.size()));
    if (!f) throw IoError("write failure: " + path.string());
}

struct Header {
    Dims dims;
    Spacing spacing;
    std::uint8_t dtype = 0;
    std::uint8_t value_space = 0;
};

Header parse_header(const std::string& data, const std::filesystem::path& path) {
    if (data.size() < kRvolHeaderSize)
        throw LengthError("file shorter than RVOL header: " + path.string());
    if (std::memcmp(data.data(), kRvolMagic, 4) != 0)
        throw FormatError("bad magic (not an RVOL file): " + path.string());
    std::size_t off = 4;
    const auto version = take<std::uint32_t>(data, off);
    if (version != kRvolVersion)
        throw FormatError("unsupported RVOL version " + std::to_string(version));
    Header h;
    h.dims.d = take<std::uint32_t>(data, off);
    h.dims.h = take<std::uint32_t>(data, off);
    h.dims.w = take<std::uint32_t>(data, off);
    h.spacing.sz = take<float>(data, off);
    h.spacing.sy = take<float>(data, off);
    h.spacing.sx = take<float>(data, off);
    h.dtype = take<std::uint8_t>(data, off);
    h.value_space = take<std::uint8_t>(data, off);
    if (h.dims.count() == 0)
        throw FormatError("zero voxel count in header: " + path.string());
    if (!(h.spacing.sz > 0 && h.spacing.sy > 0 && h.spacing.sx > 0))
        throw FormatError("non-positive spacing in header: " + path.string());
    if (h.dtype > 1)
        throw FormatError("unknown dtype " + std::to_string(h.dtype));
    if (h.value_space > 2)
        throw FormatError("unknown value_space " + std::to_string(h.value_space));
    return h;
}

std::string header_bytes(Dims dims, Spacing spacing, std::uint8_t dtype,
                         std::uint8_t value_space) {
    std::string out;
    out.append(kRvolMagic, 4);
    put<std::uint32_t>(out, kRvolVersion);
    put<std::uint32_t>(out, dims.d);
    put<std::uint32_t>(out, dims.h);
    put<std::uint32_t>(out, dims.w);
    put<float>(out, spacing.sz);
    put<float>(out, spacing.sy);
    put<float>(out, spacing.sx);
    put<std::uint8_t>(out, dtype);
    put<std::uint8_t>(out, value_space);
    return out;
}

}  // namespace

std::size_t Mask::count() const {
    std::size_t n = 0;
    for (auto b : bits) n += (b != 0);
    return n;
}

Mask make_mask(Dims dims, bool fill) {
    Mask m;
    m.dims = dims;
    m.bits.assign(dims.count(), fill ? 1 : 0);
    return m;
}

void validate(const Volume& v) {
    if (v.dims.count() == 0)
        throw ArgumentError("volume has zero voxels");
    if (v.voxels.size() != v.dims.count())
        throw ArgumentError("voxel count does not match dims");
    if (!(v.spacing.sz > 0 && v.spacing.sy > 0 && v.spacing.sx > 0))
        throw ArgumentError("spacing components must be positive");
    for (float x : v.voxels) {
        if (!std::isfinite(x)) throw ArgumentError("non-finite voxel value");
    }
    if (v.value_space == ValueSpace::Normalized) {
        for (float x : v.voxels) {
            if (x < -0.5f || x > 0.5f)
                throw ArgumentError("normalized voxel outside [-0.5, +0.5]");
        }
    }
}

Volume read_volume(const std::filesystem::path& path) {
    const std::string data = read_all(path);
    const Header h = parse_header(data, path);
    if (h.dtype != 0)
        throw FormatError("expected scalar volume (dtype 0), got mask: " +
                          path.string());
    const std::size_t n = h.dims.count();
    if (data.size() != kRvolHeaderSize + n * sizeof(float))
        throw LengthError("payload size mismatch: " + path.string());
    Volume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.value_space = static_cast<ValueSpace>(h.value_space);
    v.voxels.resize(n);
    std::memcpy(v.voxels.data(), data.data() + kRvolHeaderSize,
                n * sizeof(float));
    validate(v);
    return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
    validate(v);
    std::string out = header_bytes(v.dims, v.spacing, 0,
                                   static_cast<std::uint8_t>(v.value_space));
    const std::size_t n = v.dims.count();
    out.resize(kRvolHeaderSize + n * sizeof(float));
    std::memcpy(out.data() + kRvolHeaderSize, v.voxels.data(),
                n * sizeof(float));
    write_all(path, out);
}

Mask read_mask(const std::filesystem::path& path) {
    const std::string data = read_all(path);
    const Header h = parse_header(data, path);
    if (h.dtype != 1)
        throw FormatError("expected mask (dtype 1): " + path.string());
    const std::size_t n = h.dims.count();
    if (data.size() != kRvolHeaderSize + n)
        throw LengthError("payload size mismatch: " + path.string());
    Mask m;
    m.dims = h.dims;
    m.bits.resize(n);
    std::memcpy(m.bits.data(), data.data() + kRvolHeaderSize, n);
    for (auto b : m.bits) {
        if (b > 1) throw FormatError("mask byte outside {0,1}: " + path.string());
    }
    return m;
}

void write_mask(const Mask& m, const Spacing& spacing,
                const std::filesystem::path& path) {
    if (m.bits.size() != m.dims.count())
        throw ArgumentError("mask bit count does not match dims");
    std::string out = header_bytes(m.dims, spacing, 1, 0);
    out.append(reinterpret_cast<const char*>(m.bits.data()), m.bits.size());
    write_all(path, out);
}

}  // namespace volflow
