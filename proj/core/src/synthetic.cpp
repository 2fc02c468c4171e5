#include "volflow/synthetic.hpp"

#include <cmath>
#include <vector>

#include "volflow/rng.hpp"
#include "volflow/smoothing.hpp"

namespace volflow {

namespace {

constexpr float kAirHu = -1000.0f;
constexpr float kLungMeanHu = -800.0f;
constexpr float kLungStdHu = 100.0f;
// Lung ellipsoid semi-axes as a fraction of each volume extent.
constexpr double kLungAxisFraction = 0.35;
constexpr int kMaxPlacementRetries = 1000;

struct Ellipsoid {
    double cz, cy, cx;     // center, voxel coordinates
    double rz, ry, rx;     // semi-axes, voxels

    bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const {
        const double az = (double(z) - cz) / rz;
        const double ay = (double(y) - cy) / ry;
        const double ax = (double(x) - cx) / rx;
        return az * az + ay * ay + ax * ax <= 1.0;
    }
};

void validate_spec(const SynthSpec& s) {
    if (s.dims.d < 16 || s.dims.h < 16 || s.dims.w < 16)
        throw ArgumentError("synthetic dims must be >= 16 per axis");
    if (!(s.spacing.sz > 0 && s.spacing.sy > 0 && s.spacing.sx > 0))
        throw ArgumentError("synthetic spacing must be positive");
    if (!(s.texture_smoothness > 0))
        throw ArgumentError("texture_smoothness must be positive");
    if (!(s.lesion_radius_mm > 0))
        throw ArgumentError("lesion_radius_mm must be positive");
}

// Mark every voxel of `e` in `out`; returns false (without writing) if
// any voxel falls outside `bound`.
bool stamp_if_inside(const Ellipsoid& e, const Mask& bound, Mask& out) {
    const std::int64_t D = bound.dims.d, H = bound.dims.h, W = bound.dims.w;
    const std::int64_t zlo = std::int64_t(std::floor(e.cz - e.rz));
    const std::int64_t zhi = std::int64_t(std::ceil(e.cz + e.rz));
    const std::int64_t ylo = std::int64_t(std::floor(e.cy - e.ry));
    const std::int64_t yhi = std::int64_t(std::ceil(e.cy + e.ry));
    const std::int64_t xlo = std::int64_t(std::floor(e.cx - e.rx));
    const std::int64_t xhi = std::int64_t(std::ceil(e.cx + e.rx));

    std::vector<std::size_t> hits;
    for (std::int64_t z = zlo; z <= zhi; ++z) {
        for (std::int64_t y = ylo; y <= yhi; ++y) {
            for (std::int64_t x = xlo; x <= xhi; ++x) {
                if (!e.contains(z, y, x)) continue;
                if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W)
                    return false;
                const std::size_t idx = std::size_t((z * H + y) * W + x);
                if (!bound.bits[idx]) return false;
                hits.push_back(idx);
            }
        }
    }
    if (hits.empty()) return false;
    for (auto idx : hits) out.bits[idx] = 1;
    return true;
}

// True if the candidate, dilated by one voxel, stays clear of existing
// lesions. Keeps lesions 26-disconnected from each other.
bool clear_of(const Ellipsoid& e, const Mask& lesions) {
    const std::int64_t D = lesions.dims.d, H = lesions.dims.h, W = lesions.dims.w;
    const std::int64_t zlo = std::max<std::int64_t>(0, std::int64_t(std::floor(e.cz - e.rz)) - 1);
    const std::int64_t zhi = std::min<std::int64_t>(D - 1, std::int64_t(std::ceil(e.cz + e.rz)) + 1);
    const std::int64_t ylo = std::max<std::int64_t>(0, std::int64_t(std::floor(e.cy - e.ry)) - 1);
    const std::int64_t yhi = std::min<std::int64_t>(H - 1, std::int64_t(std::ceil(e.cy + e.ry)) + 1);
    const std::int64_t xlo = std::max<std::int64_t>(0, std::int64_t(std::floor(e.cx - e.rx)) - 1);
    const std::int64_t xhi = std::min<std::int64_t>(W - 1, std::int64_t(std::ceil(e.cx + e.rx)) + 1);
    for (std::int64_t z = zlo; z <= zhi; ++z) {
        for (std::int64_t y = ylo; y <= yhi; ++y) {
            for (std::int64_t x = xlo; x <= xhi; ++x) {
                if (lesions.bits[std::size_t((z * H + y) * W + x)]) return false;
            }
        }
    }
    return true;
}

}  // namespace

SynthVolume generate_synthetic(const SynthSpec& spec) {
    validate_spec(spec);
    const Dims dims = spec.dims;
    const std::int64_t D = dims.d, H = dims.h, W = dims.w;
    const std::size_t n = dims.count();

    SynthVolume out;
    out.volume.dims = dims;
    out.volume.spacing = spec.spacing;
    out.volume.value_space = ValueSpace::HU;
    out.lung = make_mask(dims, false);
    out.lesions = make_mask(dims, false);

    // Lung region: axis-aligned ellipsoid centered in the volume.
    const Ellipsoid lung{
        (double(D) - 1.0) / 2.0, (double(H) - 1.0) / 2.0, (double(W) - 1.0) / 2.0,
        kLungAxisFraction * double(D), kLungAxisFraction * double(H),
        kLungAxisFraction * double(W)};
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                if (lung.contains(z, y, x))
                    out.lung.bits[std::size_t((z * H + y) * W + x)] = 1;
            }
        }
    }

    // Texture: white noise, blurred, standardized, mapped to the lung band.
    Rng noise_rng(Rng::derive(spec.seed, 1));
    std::vector<double> field(n);
    for (std::size_t i = 0; i < n; ++i) field[i] = noise_rng.normal();
    gaussian_smooth_separable(field, dims.d, dims.h, dims.w,
                              double(spec.texture_smoothness));
    double mean = 0.0;
    for (double v : field) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= double(n);
    const double inv_std = 1.0 / std::sqrt(var);

    out.volume.voxels.assign(n, kAirHu);
    for (std::size_t i = 0; i < n; ++i) {
        if (out.lung.bits[i]) {
            const double z = (field[i] - mean) * inv_std;
            out.volume.voxels[i] = float(kLungMeanHu + kLungStdHu * z);
        }
    }

    // Lesions: uniform random centers over lung voxels, accepted when the
    // whole ellipsoid fits inside the lung and stays disjoint from
    // previously placed lesions.
    if (spec.lesion_count > 0) {
        std::vector<std::size_t> lung_voxels;
        lung_voxels.reserve(n / 4);
        for (std::size_t i = 0; i < n; ++i)
            if (out.lung.bits[i]) lung_voxels.push_back(i);
        if (lung_voxels.empty())
            throw PlacementError("lung region is empty");

        Rng place_rng(Rng::derive(spec.seed, 2));
        for (std::uint32_t li = 0; li < spec.lesion_count; ++li) {
            bool placed = false;
            for (int attempt = 0; attempt < kMaxPlacementRetries; ++attempt) {
                const std::size_t idx =
                    lung_voxels[place_rng.uniform_index(lung_voxels.size())];
                const std::int64_t cz = std::int64_t(idx) / (H * W);
                const std::int64_t cy = (std::int64_t(idx) / W) % H;
                const std::int64_t cx = std::int64_t(idx) % W;
                const Ellipsoid lesion{
                    double(cz), double(cy), double(cx),
                    double(spec.lesion_radius_mm) / double(spec.spacing.sz),
                    double(spec.lesion_radius_mm) / double(spec.spacing.sy),
                    double(spec.lesion_radius_mm) / double(spec.spacing.sx)};
                if (!clear_of(lesion, out.lesions)) continue;
                if (stamp_if_inside(lesion, out.lung, out.lesions)) {
                    placed = true;
                    break;
                }
            }
            if (!placed)
                throw PlacementError(
                    "could not place lesion " + std::to_string(li) + " of radius " +
                    std::to_string(spec.lesion_radius_mm) + " mm inside the lung");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (out.lesions.bits[i])
                out.volume.voxels[i] += spec.lesion_intensity_shift;
        }
    }

    return out;
}

}  // namespace volflow
