#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "volflow/errors.hpp"

namespace volflow {

/// Voxel counts (z, y, x). z is the slowest-varying axis in memory.
struct Dims {
    std::uint32_t d = 0, h = 0, w = 0;

    std::size_t count() const {
        return std::size_t(d) * std::size_t(h) * std::size_t(w);
    }
    bool operator==(const Dims&) const = default;
};

/// Physical voxel spacing in millimetres, per axis (sz, sy, sx).
struct Spacing {
    float sz = 1.0f, sy = 1.0f, sx = 1.0f;

    double voxel_volume_mm3() const {
        return double(sz) * double(sy) * double(sx);
    }
    bool operator==(const Spacing&) const = default;
};

/// What the scalar values mean.
enum class ValueSpace : std::uint8_t {
    HU = 0,          ///< Hounsfield units
    Normalized = 1,  ///< clipped + mapped to [-0.5, +0.5]
    Map = 2,         ///< aggregated per-voxel log-likelihood (nats/dim)
};

/// Dense 3D scalar field with physical spacing. Values are stored in
/// z-major order: index = (z * h + y) * w + x.
struct Volume {
    Dims dims;
    Spacing spacing;
    ValueSpace value_space = ValueSpace::HU;
    std::vector<float> voxels;

    float& at(std::uint32_t z, std::uint32_t y, std::uint32_t x) {
        return voxels[(std::size_t(z) * dims.h + y) * dims.w + x];
    }
    float at(std::uint32_t z, std::uint32_t y, std::uint32_t x) const {
        return voxels[(std::size_t(z) * dims.h + y) * dims.w + x];
    }
};

/// Dense boolean field; dims must match the associated Volume.
struct Mask {
    Dims dims;
    std::vector<std::uint8_t> bits;

    bool get(std::uint32_t z, std::uint32_t y, std::uint32_t x) const {
        return bits[(std::size_t(z) * dims.h + y) * dims.w + x] != 0;
    }
    void set(std::uint32_t z, std::uint32_t y, std::uint32_t x, bool v) {
        bits[(std::size_t(z) * dims.h + y) * dims.w + x] = v ? 1 : 0;
    }
    std::size_t count() const;
};

Mask make_mask(Dims dims, bool fill = false);

/// Throws ArgumentError if the volume violates its invariants
/// (dims/voxel count mismatch, non-positive spacing, NaN/Inf voxels,
/// normalized values outside [-0.5, +0.5]).
void validate(const Volume& v);

// ---------------------------------------------------------------------------
// RVOL file format (little-endian, single file):
//
//   offset  size  field
//   0       4     magic "RVL1"
//   4       4     format version, u32 = 1
//   8       12    d, h, w as u32
//   20      12    sz, sy, sx as f32
//   32      1     dtype u8: 0 = f32 scalar, 1 = u8 mask
//   33      1     value_space u8: 0 = HU, 1 = Normalized, 2 = Map
//   34      ...   payload, d*h*w elements, z-major (z slowest, x fastest)
//
// Masks use dtype 1 with one byte per voxel in {0, 1}.
// ---------------------------------------------------------------------------

inline constexpr char kRvolMagic[4] = {'R', 'V', 'L', '1'};
inline constexpr std::uint32_t kRvolVersion = 1;
inline constexpr std::size_t kRvolHeaderSize = 34;

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& v, const std::filesystem::path& path);

Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& m, const Spacing& spacing,
                const std::filesystem::path& path);

}  // namespace volflow
