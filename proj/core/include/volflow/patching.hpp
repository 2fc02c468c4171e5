#pragma once

#include <cstdint>
#include <vector>

#include "volflow/rng.hpp"
#include "volflow/volume.hpp"

namespace volflow {

/// Voxel coordinates of a patch's low corner in its source volume.
struct Origin {
    std::uint32_t z = 0, y = 0, x = 0;
    bool operator==(const Origin&) const = default;
};

/// Cube of edge E extracted at `origin`; values in source order (z-major).
struct Patch {
    Origin origin;
    std::uint32_t edge = 0;
    std::vector<float> data;
};

/// Inference tiling parameters. stride = patch_edge - overlap.
struct GridSpec {
    std::uint32_t patch_edge = 48;
    std::uint32_t overlap = 10;

    std::uint32_t stride() const { return patch_edge - overlap; }
};

void validate(const GridSpec& g);

/// Deterministic inference grid: per axis positions 0, s, 2s, ... plus a
/// final position clamped to dim - patch_edge when the regular sequence
/// does not already reach it. Cartesian product in lexicographic (z, y, x)
/// order. Every voxel is covered by at least one patch.
/// Throws ShapeError if any dim < patch_edge.
std::vector<Origin> inference_grid(Dims dims, const GridSpec& g);

/// Per-axis grid positions (exposed for tests and aggregation).
std::vector<std::uint32_t> grid_positions(std::uint32_t dim,
                                          std::uint32_t patch_edge,
                                          std::uint32_t stride);

/// O(1) patch/mask overlap queries via a 3D summed-area table.
class MaskCoverage {
public:
    explicit MaskCoverage(const Mask& m);

    /// Number of true voxels in [origin, origin + edge) per axis.
    std::uint64_t box_count(Origin origin, std::uint32_t edge) const;

    double fraction(Origin origin, std::uint32_t edge) const {
        const double e = double(edge);
        return double(box_count(origin, edge)) / (e * e * e);
    }

    Dims dims() const { return dims_; }

private:
    Dims dims_;
    std::vector<std::uint64_t> table_;  // (d+1)(h+1)(w+1) exclusive prefix sums
};

/// Draws patch origins uniformly over all positions whose mask coverage
/// is at least `min_mask_fraction`. Uses rejection sampling against the
/// coverage table; if the observed rejection rate exceeds 99% it falls
/// back to a precomputed valid-origin set (the distribution is uniform
/// over valid origins either way).
class OriginSampler {
public:
    OriginSampler(Dims dims, const Mask& mask, std::uint32_t edge,
                  double min_mask_fraction);

    Origin draw(Rng& rng);

    /// Enumerate every valid origin (lexicographic). Used by the direct
    /// path and exposed for tests.
    const std::vector<Origin>& valid_origins();

private:
    Dims dims_;
    std::uint32_t edge_;
    double min_fraction_;
    MaskCoverage coverage_;
    std::uint64_t nz_, ny_, nx_;
    std::uint64_t attempts_ = 0, accepts_ = 0;
    bool use_set_ = false;
    bool set_built_ = false;
    std::vector<Origin> valid_;
};

/// Extract the cube at `origin` from `v`.
Patch extract_patch(const Volume& v, Origin origin, std::uint32_t edge);

/// Sample `n` training patches from a normalized volume, origins uniform
/// over positions with mask coverage >= min_mask_fraction. Deterministic
/// given seed. Throws SamplingError when no valid origin exists.
std::vector<Patch> sample_training_patches(const Volume& v, const Mask& m,
                                           std::size_t n, std::uint32_t edge,
                                           double min_mask_fraction,
                                           std::uint64_t seed);

}  // namespace volflow
