#pragma once

#include <cstdint>
#include <vector>

#include "volflow/errors.hpp"

namespace volflow {

/// Dense rank-4 tensor with (channel, z, y, x) layout, channel-major.
/// Value semantics; the numeric type is float for production paths and
/// double for verification oracles.
template <typename T>
struct Tensor4 {
    std::uint32_t c = 0, d = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor4() = default;
    Tensor4(std::uint32_t c_, std::uint32_t d_, std::uint32_t h_, std::uint32_t w_)
        : c(c_), d(d_), h(h_), w(w_), v(std::size_t(c_) * d_ * h_ * w_, T(0)) {}

    std::size_t size() const { return v.size(); }
    std::size_t spatial() const { return std::size_t(d) * h * w; }

    T* channel(std::uint32_t ch) { return v.data() + std::size_t(ch) * spatial(); }
    const T* channel(std::uint32_t ch) const {
        return v.data() + std::size_t(ch) * spatial();
    }

    T& at(std::uint32_t ch, std::uint32_t z, std::uint32_t y, std::uint32_t x) {
        return v[((std::size_t(ch) * d + z) * h + y) * w + x];
    }
    T at(std::uint32_t ch, std::uint32_t z, std::uint32_t y,
         std::uint32_t x) const {
        return v[((std::size_t(ch) * d + z) * h + y) * w + x];
    }

    bool same_shape(const Tensor4& o) const {
        return c == o.c && d == o.d && h == o.h && w == o.w;
    }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }
};

template <typename T, typename U>
Tensor4<T> tensor_cast(const Tensor4<U>& src) {
    Tensor4<T> out(src.c, src.d, src.h, src.w);
    for (std::size_t i = 0; i < src.v.size(); ++i) out.v[i] = T(src.v[i]);
    return out;
}

}  // namespace volflow
