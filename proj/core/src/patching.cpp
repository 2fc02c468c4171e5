#include "volflow/patching.hpp"

#include <string>

namespace volflow {

void validate(const GridSpec& g) {
    if (g.patch_edge == 0) throw ArgumentError("patch_edge must be positive");
    if (g.overlap >= g.patch_edge)
        throw ArgumentError("overlap must be smaller than patch_edge");
}

std::vector<std::uint32_t> grid_positions(std::uint32_t dim,
                                          std::uint32_t patch_edge,
                                          std::uint32_t stride) {
    const std::uint32_t last = dim - patch_edge;
    std::vector<std::uint32_t> pos;
    for (std::uint64_t p = 0; p <= last; p += stride) {
        pos.push_back(std::uint32_t(p));
    }
    if (pos.back() != last) pos.push_back(last);
    return pos;
}

std::vector<Origin> inference_grid(Dims dims, const GridSpec& g) {
    validate(g);
    if (dims.d < g.patch_edge || dims.h < g.patch_edge || dims.w < g.patch_edge)
        throw ShapeError("volume dims smaller than patch_edge");
    const auto zs = grid_positions(dims.d, g.patch_edge, g.stride());
    const auto ys = grid_positions(dims.h, g.patch_edge, g.stride());
    const auto xs = grid_positions(dims.w, g.patch_edge, g.stride());
    std::vector<Origin> out;
    out.reserve(zs.size() * ys.size() * xs.size());
    for (auto z : zs)
        for (auto y : ys)
            for (auto x : xs) out.push_back(Origin{z, y, x});
    return out;
}

MaskCoverage::MaskCoverage(const Mask& m) : dims_(m.dims) {
    const std::size_t D = dims_.d, H = dims_.h, W = dims_.w;
    table_.assign((D + 1) * (H + 1) * (W + 1), 0);
    auto T = [&](std::size_t z, std::size_t y, std::size_t x) -> std::uint64_t& {
        return table_[(z * (H + 1) + y) * (W + 1) + x];
    };
    for (std::size_t z = 0; z < D; ++z) {
        for (std::size_t y = 0; y < H; ++y) {
            std::uint64_t row = 0;
            for (std::size_t x = 0; x < W; ++x) {
                row += m.bits[(z * H + y) * W + x];
                T(z + 1, y + 1, x + 1) = row + T(z, y + 1, x + 1) +
                                         T(z + 1, y, x + 1) - T(z, y, x + 1);
            }
        }
    }
}

std::uint64_t MaskCoverage::box_count(Origin o, std::uint32_t edge) const {
    const std::size_t H = dims_.h, W = dims_.w;
    auto T = [&](std::size_t z, std::size_t y, std::size_t x) -> std::uint64_t {
        return table_[(z * (H + 1) + y) * (W + 1) + x];
    };
    const std::size_t z0 = o.z, y0 = o.y, x0 = o.x;
    const std::size_t z1 = o.z + edge, y1 = o.y + edge, x1 = o.x + edge;
    return T(z1, y1, x1) - T(z0, y1, x1) - T(z1, y0, x1) - T(z1, y1, x0) +
           T(z0, y0, x1) + T(z0, y1, x0) + T(z1, y0, x0) - T(z0, y0, x0);
}

OriginSampler::OriginSampler(Dims dims, const Mask& mask, std::uint32_t edge,
                             double min_mask_fraction)
    : dims_(dims),
      edge_(edge),
      min_fraction_(min_mask_fraction),
      coverage_(mask) {
    if (mask.dims != dims) throw ShapeError("mask dims do not match volume");
    if (dims.d < edge || dims.h < edge || dims.w < edge)
        throw ShapeError("volume dims smaller than patch edge");
    nz_ = dims.d - edge + 1;
    ny_ = dims.h - edge + 1;
    nx_ = dims.w - edge + 1;
}

const std::vector<Origin>& OriginSampler::valid_origins() {
    if (!set_built_) {
        const double need =
            min_fraction_ * double(edge_) * double(edge_) * double(edge_);
        for (std::uint32_t z = 0; z < nz_; ++z)
            for (std::uint32_t y = 0; y < ny_; ++y)
                for (std::uint32_t x = 0; x < nx_; ++x) {
                    const Origin o{z, y, x};
                    if (double(coverage_.box_count(o, edge_)) >= need)
                        valid_.push_back(o);
                }
        set_built_ = true;
    }
    return valid_;
}

Origin OriginSampler::draw(Rng& rng) {
    const double need =
        min_fraction_ * double(edge_) * double(edge_) * double(edge_);
    while (!use_set_) {
        const Origin o{std::uint32_t(rng.uniform_index(nz_)),
                       std::uint32_t(rng.uniform_index(ny_)),
                       std::uint32_t(rng.uniform_index(nx_))};
        ++attempts_;
        if (double(coverage_.box_count(o, edge_)) >= need) {
            ++accepts_;
            return o;
        }
        if (attempts_ >= 1000 && double(accepts_) < 0.01 * double(attempts_)) {
            use_set_ = true;
        }
    }
    const auto& set = valid_origins();
    if (set.empty())
        throw SamplingError(
            "no patch origin satisfies min_mask_fraction = " +
            std::to_string(min_fraction_));
    return set[rng.uniform_index(set.size())];
}

Patch extract_patch(const Volume& v, Origin o, std::uint32_t edge) {
    if (o.z + edge > v.dims.d || o.y + edge > v.dims.h || o.x + edge > v.dims.w)
        throw ShapeError("patch extends past the volume boundary");
    Patch p;
    p.origin = o;
    p.edge = edge;
    p.data.resize(std::size_t(edge) * edge * edge);
    std::size_t i = 0;
    for (std::uint32_t z = 0; z < edge; ++z)
        for (std::uint32_t y = 0; y < edge; ++y)
            for (std::uint32_t x = 0; x < edge; ++x, ++i)
                p.data[i] = v.at(o.z + z, o.y + y, o.x + x);
    return p;
}

std::vector<Patch> sample_training_patches(const Volume& v, const Mask& m,
                                           std::size_t n, std::uint32_t edge,
                                           double min_mask_fraction,
                                           std::uint64_t seed) {
    if (v.value_space != ValueSpace::Normalized)
        throw ArgumentError("training patches require a normalized volume");
    if (m.count() == 0) throw SamplingError("mask is empty");
    OriginSampler sampler(v.dims, m, edge, min_mask_fraction);
    Rng rng(seed);
    std::vector<Patch> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(extract_patch(v, sampler.draw(rng), edge));
    }
    return out;
}

}  // namespace volflow
