#include "volflow/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "volflow/components.hpp"

namespace volflow {

namespace {

constexpr double kLungBandLo = -950.0;
constexpr double kLungBandHi = -300.0;
constexpr double kMinLungComponentCm3 = 1.0;

Dims resampled_dims(Dims in, Spacing s, double t) {
    auto out_dim = [t](std::uint32_t dim, float sp) {
        const double exact = double(dim) * double(sp) / t;
        return std::uint32_t(std::max<long long>(1, std::llround(exact)));
    };
    return Dims{out_dim(in.d, s.sz), out_dim(in.h, s.sy), out_dim(in.w, s.sx)};
}

// Continuous input index of an output voxel center, clamped to the
// input extent.
inline double center_coord(std::uint32_t out_idx, double t, float in_spacing,
                           std::uint32_t in_dim) {
    const double phys = (double(out_idx) + 0.5) * t;
    double c = phys / double(in_spacing) - 0.5;
    return std::clamp(c, 0.0, double(in_dim - 1));
}

}  // namespace

void validate(const PreprocessConfig& cfg) {
    if (!(cfg.target_spacing_mm > 0))
        throw ArgumentError("target spacing must be positive");
    if (!(cfg.hu_min < cfg.hu_max))
        throw ArgumentError("hu_min must be below hu_max");
    if (!(cfg.out_lo < cfg.out_hi))
        throw ArgumentError("out_lo must be below out_hi");
}

Volume resample(const Volume& v, double target_spacing_mm) {
    if (!(target_spacing_mm > 0))
        throw ArgumentError("target spacing must be positive");
    validate(v);

    const Dims out_dims = resampled_dims(v.dims, v.spacing, target_spacing_mm);
    Volume out;
    out.dims = out_dims;
    out.spacing = Spacing{float(target_spacing_mm), float(target_spacing_mm),
                          float(target_spacing_mm)};
    out.value_space = v.value_space;
    out.voxels.resize(out_dims.count());

    const std::uint32_t D = v.dims.d, H = v.dims.h, W = v.dims.w;
    std::size_t o = 0;
    for (std::uint32_t z = 0; z < out_dims.d; ++z) {
        const double cz = center_coord(z, target_spacing_mm, v.spacing.sz, D);
        const std::uint32_t z0 = std::uint32_t(cz);
        const std::uint32_t z1 = std::min(z0 + 1, D - 1);
        const double fz = cz - double(z0);
        for (std::uint32_t y = 0; y < out_dims.h; ++y) {
            const double cy = center_coord(y, target_spacing_mm, v.spacing.sy, H);
            const std::uint32_t y0 = std::uint32_t(cy);
            const std::uint32_t y1 = std::min(y0 + 1, H - 1);
            const double fy = cy - double(y0);
            for (std::uint32_t x = 0; x < out_dims.w; ++x, ++o) {
                const double cx =
                    center_coord(x, target_spacing_mm, v.spacing.sx, W);
                const std::uint32_t x0 = std::uint32_t(cx);
                const std::uint32_t x1 = std::min(x0 + 1, W - 1);
                const double fx = cx - double(x0);

                const double c000 = v.at(z0, y0, x0), c001 = v.at(z0, y0, x1);
                const double c010 = v.at(z0, y1, x0), c011 = v.at(z0, y1, x1);
                const double c100 = v.at(z1, y0, x0), c101 = v.at(z1, y0, x1);
                const double c110 = v.at(z1, y1, x0), c111 = v.at(z1, y1, x1);

                const double c00 = c000 + (c001 - c000) * fx;
                const double c01 = c010 + (c011 - c010) * fx;
                const double c10 = c100 + (c101 - c100) * fx;
                const double c11 = c110 + (c111 - c110) * fx;
                const double c0 = c00 + (c01 - c00) * fy;
                const double c1 = c10 + (c11 - c10) * fy;
                out.voxels[o] = float(c0 + (c1 - c0) * fz);
            }
        }
    }
    return out;
}

Mask resample_mask(const Mask& m, const Spacing& spacing,
                   double target_spacing_mm) {
    if (!(target_spacing_mm > 0))
        throw ArgumentError("target spacing must be positive");
    const Dims out_dims = resampled_dims(m.dims, spacing, target_spacing_mm);
    Mask out = make_mask(out_dims, false);
    std::size_t o = 0;
    for (std::uint32_t z = 0; z < out_dims.d; ++z) {
        const std::uint32_t zi = std::uint32_t(std::llround(
            center_coord(z, target_spacing_mm, spacing.sz, m.dims.d)));
        for (std::uint32_t y = 0; y < out_dims.h; ++y) {
            const std::uint32_t yi = std::uint32_t(std::llround(
                center_coord(y, target_spacing_mm, spacing.sy, m.dims.h)));
            for (std::uint32_t x = 0; x < out_dims.w; ++x, ++o) {
                const std::uint32_t xi = std::uint32_t(std::llround(
                    center_coord(x, target_spacing_mm, spacing.sx, m.dims.w)));
                out.bits[o] = m.get(zi, yi, xi) ? 1 : 0;
            }
        }
    }
    return out;
}

Volume clip_normalize(const Volume& v, const PreprocessConfig& cfg) {
    validate(cfg);
    validate(v);
    if (v.value_space != ValueSpace::HU)
        throw ArgumentError("clip_normalize expects an HU-space volume");

    const double scale = (cfg.out_hi - cfg.out_lo) / (cfg.hu_max - cfg.hu_min);
    Volume out = v;
    out.value_space = ValueSpace::Normalized;
    for (auto& x : out.voxels) {
        const double clamped = std::clamp(double(x), cfg.hu_min, cfg.hu_max);
        const double mapped = cfg.out_lo + (clamped - cfg.hu_min) * scale;
        // Guard against half-ulp overshoot of the affine map.
        x = float(std::clamp(mapped, cfg.out_lo, cfg.out_hi));
    }
    return out;
}

Mask fallback_lung_mask(const Volume& v) {
    validate(v);
    if (v.value_space != ValueSpace::HU)
        throw ArgumentError("fallback_lung_mask expects an HU-space volume");

    Mask band = make_mask(v.dims, false);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const double hu = v.voxels[i];
        band.bits[i] = (hu >= kLungBandLo && hu <= kLungBandHi) ? 1 : 0;
    }

    const Labeling lab = label_components_26(band);
    const double voxel_cm3 = v.spacing.voxel_volume_mm3() / 1000.0;

    std::vector<ComponentInfo> candidates;
    for (const auto& c : lab.components) {
        if (c.touches_all_faces()) continue;  // ambient air
        if (double(c.voxels) * voxel_cm3 < kMinLungComponentCm3) continue;
        candidates.push_back(c);
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const ComponentInfo& a, const ComponentInfo& b) {
                  return a.voxels > b.voxels;
              });
    if (candidates.size() > 2) candidates.resize(2);

    std::vector<std::uint32_t> keep;
    for (const auto& c : candidates) keep.push_back(c.label);
    Mask selected = keep_labels(lab, keep);
    return close_ball1(selected);
}

}  // namespace volflow
