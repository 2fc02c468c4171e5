#pragma once

#include <cstdint>

#include "volflow/volume.hpp"

namespace volflow {

/// Recipe for one deterministic synthetic chest-like volume. The same
/// spec always generates bit-identical output.
struct SynthSpec {
    Dims dims;
    Spacing spacing;
    std::uint64_t seed = 0;
    float texture_smoothness = 3.0f;    ///< Gaussian blur sigma, voxels
    std::uint32_t lesion_count = 0;
    float lesion_radius_mm = 8.0f;
    float lesion_intensity_shift = 300.0f;  ///< HU added inside lesions
};

struct SynthVolume {
    Volume volume;     ///< HU space
    Mask lung;         ///< ellipsoidal "lung" region
    Mask lesions;      ///< union of lesion ellipsoids, subset of lung
};

/// Generate a synthetic volume: air (-1000 HU) outside an ellipsoidal
/// lung region; inside, smoothed seeded Gaussian noise standardized and
/// mapped to -800 +/- 100 HU; `lesion_count` ellipsoids of radius
/// `lesion_radius_mm` placed uniformly at random fully inside the lung,
/// mutually disjoint, each shifting intensity by `lesion_intensity_shift`.
///
/// Throws ArgumentError if any dim < 16 or fields are invalid, and
/// PlacementError if a lesion cannot be placed within 1000 attempts.
SynthVolume generate_synthetic(const SynthSpec& spec);

}  // namespace volflow
