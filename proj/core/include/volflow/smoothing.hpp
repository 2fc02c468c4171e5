#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace volflow {

/// Separable Gaussian smoothing of a dense z-major field, in place.
/// Kernel radius is ceil(3*sigma); at borders the kernel is renormalized
/// over its in-bounds support (weights sum to 1), so constants are
/// preserved exactly. sigma <= 0 is a no-op.
template <typename T>
void gaussian_smooth_separable(std::vector<T>& field, std::uint32_t d,
                               std::uint32_t h, std::uint32_t w, double sigma) {
    if (sigma <= 0.0) return;
    const std::int64_t radius = std::int64_t(std::ceil(3.0 * sigma));
    std::vector<T> kernel(std::size_t(2 * radius + 1));
    for (std::int64_t k = -radius; k <= radius; ++k) {
        kernel[std::size_t(k + radius)] =
            T(std::exp(-0.5 * double(k) * double(k) / (sigma * sigma)));
    }

    const std::int64_t D = d, H = h, W = w;
    std::vector<T> tmp(field.size());

    // x pass
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t base = (z * H + y) * W;
            for (std::int64_t x = 0; x < W; ++x) {
                T acc = 0, wsum = 0;
                const std::int64_t lo = std::max<std::int64_t>(-radius, -x);
                const std::int64_t hi = std::min<std::int64_t>(radius, W - 1 - x);
                for (std::int64_t k = lo; k <= hi; ++k) {
                    const T kw = kernel[std::size_t(k + radius)];
                    acc += kw * field[std::size_t(base + x + k)];
                    wsum += kw;
                }
                tmp[std::size_t(base + x)] = acc / wsum;
            }
        }
    }
    field.swap(tmp);

    // y pass
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t x = 0; x < W; ++x) {
            for (std::int64_t y = 0; y < H; ++y) {
                T acc = 0, wsum = 0;
                const std::int64_t lo = std::max<std::int64_t>(-radius, -y);
                const std::int64_t hi = std::min<std::int64_t>(radius, H - 1 - y);
                for (std::int64_t k = lo; k <= hi; ++k) {
                    const T kw = kernel[std::size_t(k + radius)];
                    acc += kw * field[std::size_t((z * H + y + k) * W + x)];
                    wsum += kw;
                }
                tmp[std::size_t((z * H + y) * W + x)] = acc / wsum;
            }
        }
    }
    field.swap(tmp);

    // z pass
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            for (std::int64_t z = 0; z < D; ++z) {
                T acc = 0, wsum = 0;
                const std::int64_t lo = std::max<std::int64_t>(-radius, -z);
                const std::int64_t hi = std::min<std::int64_t>(radius, D - 1 - z);
                for (std::int64_t k = lo; k <= hi; ++k) {
                    const T kw = kernel[std::size_t(k + radius)];
                    acc += kw * field[std::size_t(((z + k) * H + y) * W + x)];
                    wsum += kw;
                }
                tmp[std::size_t((z * H + y) * W + x)] = acc / wsum;
            }
        }
    }
    field.swap(tmp);
}

}  // namespace volflow
