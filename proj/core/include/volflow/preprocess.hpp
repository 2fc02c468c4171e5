#pragma once

#include "volflow/volume.hpp"

namespace volflow {

/// Preprocessing chain parameters: isotropic resampling target, HU clip
/// window, output range.
struct PreprocessConfig {
    double target_spacing_mm = 2.0;
    double hu_min = -1020.0;
    double hu_max = 200.0;
    double out_lo = -0.5;
    double out_hi = 0.5;
};

void validate(const PreprocessConfig& cfg);

/// Resample to isotropic spacing `target_spacing_mm` by trilinear
/// interpolation. Output dims are round(dim_i * spacing_i / target),
/// at least 1 per axis. Sample points are voxel centers: voxel i covers
/// physical [i*s, (i+1)*s), its center sits at (i + 0.5)*s. Continuous
/// input coordinates are clamped to the input extent (no extrapolation).
Volume resample(const Volume& v, double target_spacing_mm);

/// Nearest-neighbor resampling for masks, same geometry as resample().
Mask resample_mask(const Mask& m, const Spacing& spacing,
                   double target_spacing_mm);

/// Clamp to [hu_min, hu_max] and map affinely onto [out_lo, out_hi].
/// Total and monotone non-decreasing; output value_space is Normalized.
Volume clip_normalize(const Volume& v, const PreprocessConfig& cfg);

/// Heuristic lung segmentation for when no external mask is supplied:
/// threshold HU into [-950, -300], drop components touching all six
/// volume faces (ambient air), keep the largest <= 2 components of at
/// least 1 cm^3 each, then close with a radius-1 ball. An empty result
/// is returned as-is (callers may warn), never an error.
Mask fallback_lung_mask(const Volume& v);

}  // namespace volflow
