#include "volflow/components.hpp"

#include <algorithm>

namespace volflow {

namespace {

// Flood fill from a seed, marking labels and collecting stats.
void flood26(const Mask& m, std::vector<std::uint32_t>& labels,
             std::size_t seed, ComponentInfo& info,
             std::vector<std::size_t>& stack) {
    const std::int64_t D = m.dims.d, H = m.dims.h, W = m.dims.w;
    stack.clear();
    stack.push_back(seed);
    labels[seed] = info.label;
    while (!stack.empty()) {
        const std::size_t idx = stack.back();
        stack.pop_back();
        info.voxels++;
        const std::int64_t z = std::int64_t(idx) / (H * W);
        const std::int64_t y = (std::int64_t(idx) / W) % H;
        const std::int64_t x = std::int64_t(idx) % W;
        if (z == 0) info.faces |= 1;
        if (z == D - 1) info.faces |= 2;
        if (y == 0) info.faces |= 4;
        if (y == H - 1) info.faces |= 8;
        if (x == 0) info.faces |= 16;
        if (x == W - 1) info.faces |= 32;
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
            const std::int64_t nz = z + dz;
            if (nz < 0 || nz >= D) continue;
            for (std::int64_t dy = -1; dy <= 1; ++dy) {
                const std::int64_t ny = y + dy;
                if (ny < 0 || ny >= H) continue;
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    if (dz == 0 && dy == 0 && dx == 0) continue;
                    const std::int64_t nx = x + dx;
                    if (nx < 0 || nx >= W) continue;
                    const std::size_t nidx = std::size_t((nz * H + ny) * W + nx);
                    if (m.bits[nidx] && labels[nidx] == 0) {
                        labels[nidx] = info.label;
                        stack.push_back(nidx);
                    }
                }
            }
        }
    }
}

}  // namespace

Labeling label_components_26(const Mask& m) {
    Labeling out;
    out.dims = m.dims;
    out.labels.assign(m.bits.size(), 0);
    std::vector<std::size_t> stack;
    std::uint32_t next = 1;
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
        if (m.bits[i] && out.labels[i] == 0) {
            ComponentInfo info;
            info.label = next++;
            flood26(m, out.labels, i, info, stack);
            out.components.push_back(info);
        }
    }
    return out;
}

Mask keep_labels(const Labeling& lab, const std::vector<std::uint32_t>& labels) {
    std::vector<std::uint8_t> keep;
    std::uint32_t max_label = 0;
    for (const auto& c : lab.components) max_label = std::max(max_label, c.label);
    keep.assign(max_label + 1, 0);
    for (auto l : labels) {
        if (l <= max_label) keep[l] = 1;
    }
    Mask m;
    m.dims = lab.dims;
    m.bits.resize(lab.labels.size());
    for (std::size_t i = 0; i < lab.labels.size(); ++i) {
        m.bits[i] = (lab.labels[i] != 0 && keep[lab.labels[i]]) ? 1 : 0;
    }
    return m;
}

Mask close_ball1(const Mask& m) {
    const std::int64_t D = m.dims.d, H = m.dims.h, W = m.dims.w;
    static constexpr std::int64_t offs[6][3] = {
        {-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

    Mask dil = make_mask(m.dims, false);
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const std::size_t idx = std::size_t((z * H + y) * W + x);
                if (!m.bits[idx]) continue;
                dil.bits[idx] = 1;
                for (const auto& o : offs) {
                    const std::int64_t nz = z + o[0], ny = y + o[1], nx = x + o[2];
                    if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W)
                        continue;
                    dil.bits[std::size_t((nz * H + ny) * W + nx)] = 1;
                }
            }
        }
    }

    // Erosion: voxel survives if it and all in-bounds ball neighbors are
    // set. Out-of-bounds neighbors count as set, so the border behaves as
    // if padded with the dilation's own values.
    Mask out = make_mask(m.dims, false);
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const std::size_t idx = std::size_t((z * H + y) * W + x);
                if (!dil.bits[idx]) continue;
                bool all = true;
                for (const auto& o : offs) {
                    const std::int64_t nz = z + o[0], ny = y + o[1], nx = x + o[2];
                    if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W)
                        continue;
                    if (!dil.bits[std::size_t((nz * H + ny) * W + nx)]) {
                        all = false;
                        break;
                    }
                }
                out.bits[idx] = all ? 1 : 0;
            }
        }
    }
    return out;
}

}  // namespace volflow
