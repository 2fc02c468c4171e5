#pragma once

#include <cstdint>
#include <vector>

#include "volflow/volume.hpp"

namespace volflow {

/// Summary of one 26-connected component.
struct ComponentInfo {
    std::uint32_t label = 0;  ///< 1-based label
    std::size_t voxels = 0;
    /// Which of the six volume faces the component touches:
    /// bit 0/1: z=0 / z=d-1, bit 2/3: y faces, bit 4/5: x faces.
    std::uint8_t faces = 0;

    bool touches_all_faces() const { return faces == 0x3f; }
};

struct Labeling {
    Dims dims;
    std::vector<std::uint32_t> labels;  ///< 0 = background, else 1..n
    std::vector<ComponentInfo> components;
};

/// Label the true voxels of `m` with 26-connectivity (faces, edges and
/// corners are all neighbors).
Labeling label_components_26(const Mask& m);

/// Keep only the listed labels of a labeling.
Mask keep_labels(const Labeling& lab, const std::vector<std::uint32_t>& labels);

/// Morphological closing (dilation then erosion) with the radius-1 L2
/// ball: the 6-neighborhood cross plus center.
Mask close_ball1(const Mask& m);

}  // namespace volflow
