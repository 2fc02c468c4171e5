#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "volflow/errors.hpp"
#include "volflow/linalg.hpp"
#include "volflow/rng.hpp"
#include "volflow/tensor.hpp"

namespace volflow {

// ===========================================================================
// Per-channel affine normalization (ActNorm).
//
//   y[c,s] = exp(log_scale[c]) * x[c,s] + bias[c]
//   logdet = D*H*W * sum_c log_scale[c]
//
// Parameters are data-dependent initialized from the first batch so the
// post-init activations have zero mean and unit variance per channel.
// ===========================================================================

template <typename T>
struct ActNormParams {
    std::vector<T> log_scale;
    std::vector<T> bias;
    bool initialized = false;
};

template <typename T>
ActNormParams<T> actnorm_identity(std::uint32_t channels) {
    ActNormParams<T> p;
    p.log_scale.assign(channels, T(0));
    p.bias.assign(channels, T(0));
    p.initialized = true;
    return p;
}

/// Data-dependent init: choose scale/bias so applying the layer to the
/// init batch standardizes each channel (population variance).
/// Throws InitError on fewer than 2 samples or a zero-variance channel.
template <typename T>
ActNormParams<T> actnorm_init_from(const std::vector<const Tensor4<T>*>& batch) {
    if (batch.size() < 2)
        throw InitError("actnorm init needs at least 2 samples");
    const std::uint32_t C = batch[0]->c;
    ActNormParams<T> p;
    p.log_scale.assign(C, T(0));
    p.bias.assign(C, T(0));
    for (std::uint32_t c = 0; c < C; ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto* t : batch) {
            const T* ch = t->channel(c);
            const std::size_t s = t->spatial();
            for (std::size_t i = 0; i < s; ++i) sum += double(ch[i]);
            n += s;
        }
        const double mean = sum / double(n);
        // Two-pass variance: exactly zero for a constant channel, where the
        // textbook E[x^2] - mean^2 form leaves rounding residue.
        double ssq = 0.0;
        for (const auto* t : batch) {
            const T* ch = t->channel(c);
            const std::size_t s = t->spatial();
            for (std::size_t i = 0; i < s; ++i) {
                const double d = double(ch[i]) - mean;
                ssq += d * d;
            }
        }
        const double var = ssq / double(n);
        if (!(var > 1e-30))
            throw InitError("zero-variance channel in actnorm init");
        const double std_dev = std::sqrt(var);
        p.log_scale[c] = T(-std::log(std_dev));
        p.bias[c] = T(-mean / std_dev);
    }
    p.initialized = true;
    return p;
}

template <typename T>
void actnorm_forward(const ActNormParams<T>& p, const Tensor4<T>& x,
                     Tensor4<T>& y, T& logdet) {
    y = Tensor4<T>(x.c, x.d, x.h, x.w);
    const std::size_t S = x.spatial();
    T ls_sum = 0;
    for (std::uint32_t c = 0; c < x.c; ++c) {
        const T scale = std::exp(p.log_scale[c]);
        const T b = p.bias[c];
        const T* xs = x.channel(c);
        T* ys = y.channel(c);
        for (std::size_t i = 0; i < S; ++i) ys[i] = scale * xs[i] + b;
        ls_sum += p.log_scale[c];
    }
    logdet = T(S) * ls_sum;
}

template <typename T>
void actnorm_inverse(const ActNormParams<T>& p, const Tensor4<T>& y,
                     Tensor4<T>& x) {
    x = Tensor4<T>(y.c, y.d, y.h, y.w);
    const std::size_t S = y.spatial();
    for (std::uint32_t c = 0; c < y.c; ++c) {
        const T inv_scale = std::exp(-p.log_scale[c]);
        const T b = p.bias[c];
        const T* ys = y.channel(c);
        T* xs = x.channel(c);
        for (std::size_t i = 0; i < S; ++i) xs[i] = (ys[i] - b) * inv_scale;
    }
}

/// dx from dy; accumulates parameter gradients into `grad`. `lambda` is
/// dLoss/dlogdet for this sample.
template <typename T>
void actnorm_backward(const ActNormParams<T>& p, const Tensor4<T>& x,
                      const Tensor4<T>& dy, T lambda, Tensor4<T>& dx,
                      ActNormParams<T>& grad) {
    dx = Tensor4<T>(x.c, x.d, x.h, x.w);
    const std::size_t S = x.spatial();
    for (std::uint32_t c = 0; c < x.c; ++c) {
        const T scale = std::exp(p.log_scale[c]);
        const T* xs = x.channel(c);
        const T* dys = dy.channel(c);
        T* dxs = dx.channel(c);
        T db = 0, dls = 0;
        for (std::size_t i = 0; i < S; ++i) {
            dxs[i] = dys[i] * scale;
            db += dys[i];
            dls += dys[i] * xs[i];
        }
        grad.bias[c] += db;
        grad.log_scale[c] += dls * scale + lambda * T(S);
    }
}

// ===========================================================================
// Invertible 1x1x1 convolution, LU-parameterized.
//
//   y_s = W x_s per voxel, with W = P * L * (U + diag(sign * exp(log_s)))
//
// P (a row permutation) and the signs are frozen at init; the strict
// triangles and log_s train. logdet = D*H*W * sum(log_s), and the inverse
// is two triangular solves, so invertibility is structural.
// ===========================================================================

template <typename T>
struct InvConvParams {
    std::uint32_t channels = 0;
    std::vector<std::int32_t> perm;  ///< W[perm[i]] = (L*V)[i]
    std::vector<T> sign;             ///< +/-1, frozen
    std::vector<T> lower;            ///< strict lower, packed row-major
    std::vector<T> upper;            ///< strict upper, packed row-major
    std::vector<T> log_s;
};

inline std::size_t strict_count(std::uint32_t c) {
    return std::size_t(c) * (c - 1) / 2;
}
// Packed index of strict-lower (i, j), j < i.
inline std::size_t lower_index(std::uint32_t i, std::uint32_t j) {
    return std::size_t(i) * (i - 1) / 2 + j;
}
// Packed index of strict-upper (i, j), j > i, row-major.
inline std::size_t upper_index(std::uint32_t i, std::uint32_t j,
                               std::uint32_t c) {
    return std::size_t(i) * c - std::size_t(i) * (i + 1) / 2 + (j - i - 1);
}

template <typename T>
InvConvParams<T> invconv_identity(std::uint32_t channels) {
    InvConvParams<T> p;
    p.channels = channels;
    p.perm.resize(channels);
    for (std::uint32_t i = 0; i < channels; ++i) p.perm[i] = std::int32_t(i);
    p.sign.assign(channels, T(1));
    p.lower.assign(strict_count(channels), T(0));
    p.upper.assign(strict_count(channels), T(0));
    p.log_s.assign(channels, T(0));
    return p;
}

/// Init from a random orthogonal matrix (QR of seeded Gaussian), LU
/// decomposed. logdet is 0 at init since |det| = 1.
template <typename T>
InvConvParams<T> invconv_random(std::uint32_t channels, std::uint64_t seed) {
    const int n = int(channels);
    const auto w = random_orthogonal(n, seed);
    const auto f = lu_decompose(w, n);
    InvConvParams<T> p;
    p.channels = channels;
    p.perm.assign(f.perm.begin(), f.perm.end());
    p.sign.resize(channels);
    p.log_s.resize(channels);
    p.lower.resize(strict_count(channels));
    p.upper.resize(strict_count(channels));
    for (std::uint32_t i = 0; i < channels; ++i) {
        const double diag = f.upper[std::size_t(i) * channels + i];
        p.sign[i] = T(diag >= 0 ? 1 : -1);
        p.log_s[i] = T(std::log(std::fabs(diag)));
        for (std::uint32_t j = 0; j < i; ++j)
            p.lower[lower_index(i, j)] = T(f.lower[std::size_t(i) * channels + j]);
        for (std::uint32_t j = i + 1; j < channels; ++j)
            p.upper[upper_index(i, j, channels)] =
                T(f.upper[std::size_t(i) * channels + j]);
    }
    return p;
}

/// Reconstruct the full mixing matrix W = P * L * V, row-major.
template <typename T>
std::vector<T> invconv_matrix(const InvConvParams<T>& p) {
    const std::uint32_t C = p.channels;
    std::vector<T> lv(std::size_t(C) * C, T(0));
    // V rows: diag + strict upper.
    std::vector<T> diag(C);
    for (std::uint32_t i = 0; i < C; ++i)
        diag[i] = p.sign[i] * std::exp(p.log_s[i]);
    // (L*V)[i][j] = V[i][j] + sum_{k<i} L[i][k] V[k][j]
    auto vrow = [&](std::uint32_t i, std::uint32_t j) -> T {
        if (j < i) return T(0);
        if (j == i) return diag[i];
        return p.upper[upper_index(i, j, C)];
    };
    for (std::uint32_t i = 0; i < C; ++i) {
        for (std::uint32_t j = 0; j < C; ++j) {
            T acc = vrow(i, j);
            // L[i][k] is nonzero for k < i, V[k][j] for k <= j.
            const std::uint32_t kend = (j + 1 < i) ? (j + 1) : i;
            for (std::uint32_t k = 0; k < kend; ++k)
                acc += p.lower[lower_index(i, k)] * vrow(k, j);
            lv[std::size_t(i) * C + j] = acc;
        }
    }
    std::vector<T> w(std::size_t(C) * C);
    for (std::uint32_t i = 0; i < C; ++i)
        std::memcpy(&w[std::size_t(std::uint32_t(p.perm[i])) * C],
                    &lv[std::size_t(i) * C], sizeof(T) * C);
    return w;
}

/// Per-voxel channel mix y_s = W x_s.
template <typename T>
void channel_mix(const std::vector<T>& w, const Tensor4<T>& x, Tensor4<T>& y) {
    const std::uint32_t C = x.c;
    const std::size_t S = x.spatial();
    y = Tensor4<T>(C, x.d, x.h, x.w);
    for (std::uint32_t i = 0; i < C; ++i) {
        T* ys = y.channel(i);
        for (std::uint32_t j = 0; j < C; ++j) {
            const T wij = w[std::size_t(i) * C + j];
            if (wij == T(0)) continue;
            const T* xs = x.channel(j);
            for (std::size_t s = 0; s < S; ++s) ys[s] += wij * xs[s];
        }
    }
}

template <typename T>
void invconv_forward(const InvConvParams<T>& p, const Tensor4<T>& x,
                     Tensor4<T>& y, T& logdet) {
    const auto w = invconv_matrix(p);
    channel_mix(w, x, y);
    T ls = 0;
    for (auto v : p.log_s) ls += v;
    logdet = T(x.spatial()) * ls;
}

/// x = V^-1 L^-1 P^T y via triangular solves; no explicit inversion.
template <typename T>
void invconv_inverse(const InvConvParams<T>& p, const Tensor4<T>& y,
                     Tensor4<T>& x) {
    const std::uint32_t C = p.channels;
    const std::size_t S = y.spatial();
    x = Tensor4<T>(C, y.d, y.h, y.w);
    std::vector<T> inv_diag(C);
    for (std::uint32_t i = 0; i < C; ++i)
        inv_diag[i] = T(1) / (p.sign[i] * std::exp(p.log_s[i]));

    std::vector<T> t(C);
    for (std::size_t s = 0; s < S; ++s) {
        // t = P^T y: (P^T y)[i] = y[perm[i]]
        for (std::uint32_t i = 0; i < C; ++i)
            t[i] = y.v[std::size_t(std::uint32_t(p.perm[i])) * S + s];
        // forward substitution with unit-lower L
        for (std::uint32_t i = 1; i < C; ++i) {
            T acc = t[i];
            for (std::uint32_t j = 0; j < i; ++j)
                acc -= p.lower[lower_index(i, j)] * t[j];
            t[i] = acc;
        }
        // back substitution with V = strict upper + diag
        for (std::uint32_t ii = C; ii-- > 0;) {
            T acc = t[ii];
            for (std::uint32_t j = ii + 1; j < C; ++j)
                acc -= p.upper[upper_index(ii, j, C)] * x.v[std::size_t(j) * S + s];
            x.v[std::size_t(ii) * S + s] = acc * inv_diag[ii];
        }
    }
}

template <typename T>
void invconv_backward(const InvConvParams<T>& p, const Tensor4<T>& x,
                      const Tensor4<T>& dy, T lambda, Tensor4<T>& dx,
                      InvConvParams<T>& grad) {
    const std::uint32_t C = p.channels;
    const std::size_t S = x.spatial();
    const auto w = invconv_matrix(p);

    // dx = W^T dy
    dx = Tensor4<T>(C, x.d, x.h, x.w);
    for (std::uint32_t j = 0; j < C; ++j) {
        T* dxs = dx.channel(j);
        for (std::uint32_t i = 0; i < C; ++i) {
            const T wij = w[std::size_t(i) * C + j];
            if (wij == T(0)) continue;
            const T* dys = dy.channel(i);
            for (std::size_t s = 0; s < S; ++s) dxs[s] += wij * dys[s];
        }
    }

    // dW = sum_s dy_s x_s^T
    std::vector<T> dw(std::size_t(C) * C, T(0));
    for (std::uint32_t i = 0; i < C; ++i) {
        const T* dys = dy.channel(i);
        for (std::uint32_t j = 0; j < C; ++j) {
            const T* xs = x.channel(j);
            T acc = 0;
            for (std::size_t s = 0; s < S; ++s) acc += dys[s] * xs[s];
            dw[std::size_t(i) * C + j] = acc;
        }
    }

    // Chain through W = P L V:
    //   dL = P^T dW V^T   (strict lower part)
    //   dV = L^T P^T dW   (strict upper part; diagonal drives log_s)
    std::vector<T> pt_dw(std::size_t(C) * C);  // (P^T dW)[i] = dW[perm[i]]
    for (std::uint32_t i = 0; i < C; ++i)
        std::memcpy(&pt_dw[std::size_t(i) * C],
                    &dw[std::size_t(std::uint32_t(p.perm[i])) * C], sizeof(T) * C);

    auto vrow = [&](std::uint32_t i, std::uint32_t j) -> T {
        if (j < i) return T(0);
        if (j == i) return p.sign[i] * std::exp(p.log_s[i]);
        return p.upper[upper_index(i, j, C)];
    };
    // dL[i][j] = sum_k pt_dw[i][k] * V[j][k], for j < i
    for (std::uint32_t i = 1; i < C; ++i)
        for (std::uint32_t j = 0; j < i; ++j) {
            T acc = 0;
            for (std::uint32_t k = j; k < C; ++k)
                acc += pt_dw[std::size_t(i) * C + k] * vrow(j, k);
            grad.lower[lower_index(i, j)] += acc;
        }
    // dV[i][j] = sum_k L[k][i] * pt_dw[k][j], for j >= i
    for (std::uint32_t i = 0; i < C; ++i) {
        for (std::uint32_t j = i; j < C; ++j) {
            T acc = pt_dw[std::size_t(i) * C + j];  // L[i][i] = 1
            for (std::uint32_t k = i + 1; k < C; ++k)
                acc += p.lower[lower_index(k, i)] * pt_dw[std::size_t(k) * C + j];
            if (j == i) {
                // d log_s = dV_ii * sign * exp(log_s), plus the logdet term
                grad.log_s[i] += acc * p.sign[i] * std::exp(p.log_s[i]) +
                                 lambda * T(S);
            } else {
                grad.upper[upper_index(i, j, C)] += acc;
            }
        }
    }
}

// ===========================================================================
// 3D convolution, kernel 1 or 3 (padding (k-1)/2, same-size output), used
// only inside the coupling subnet.
// ===========================================================================

template <typename T>
struct Conv3dParams {
    std::uint32_t cin = 0, cout = 0, k = 1;
    std::vector<T> w;  ///< [cout][cin][kz][ky][kx]
    std::vector<T> b;  ///< [cout]
};

template <typename T>
Conv3dParams<T> conv3d_zeros(std::uint32_t cin, std::uint32_t cout,
                             std::uint32_t k) {
    Conv3dParams<T> p;
    p.cin = cin;
    p.cout = cout;
    p.k = k;
    p.w.assign(std::size_t(cout) * cin * k * k * k, T(0));
    p.b.assign(cout, T(0));
    return p;
}

/// He-style init: w ~ N(0, 2 / fan_in), zero bias.
template <typename T>
Conv3dParams<T> conv3d_he(std::uint32_t cin, std::uint32_t cout,
                          std::uint32_t k, Rng& rng) {
    auto p = conv3d_zeros<T>(cin, cout, k);
    const double std_dev = std::sqrt(2.0 / (double(cin) * k * k * k));
    for (auto& x : p.w) x = T(std_dev * rng.normal());
    return p;
}

template <typename T>
void conv3d_forward(const Conv3dParams<T>& p, const Tensor4<T>& x,
                    Tensor4<T>& y) {
    const std::int64_t D = x.d, H = x.h, W = x.w;
    const std::int64_t K = p.k, pad = (K - 1) / 2;
    y = Tensor4<T>(p.cout, x.d, x.h, x.w);
    for (std::uint32_t co = 0; co < p.cout; ++co) {
        T* yc = y.channel(co);
        const T bias = p.b[co];
        for (std::size_t s = 0; s < y.spatial(); ++s) yc[s] = bias;
    }
    for (std::uint32_t co = 0; co < p.cout; ++co) {
        for (std::uint32_t ci = 0; ci < p.cin; ++ci) {
            const T* xc = x.channel(ci);
            T* yc = y.channel(co);
            const T* wk =
                &p.w[(std::size_t(co) * p.cin + ci) * std::size_t(K * K * K)];
            for (std::int64_t kz = 0; kz < K; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < K; ++ky) {
                    const std::int64_t dy = ky - pad;
                    for (std::int64_t kx = 0; kx < K; ++kx) {
                        const std::int64_t dx = kx - pad;
                        const T wv = wk[(kz * K + ky) * K + kx];
                        const std::int64_t zlo = std::max<std::int64_t>(0, -dz);
                        const std::int64_t zhi = std::min<std::int64_t>(D, D - dz);
                        const std::int64_t ylo = std::max<std::int64_t>(0, -dy);
                        const std::int64_t yhi = std::min<std::int64_t>(H, H - dy);
                        const std::int64_t xlo = std::max<std::int64_t>(0, -dx);
                        const std::int64_t xhi = std::min<std::int64_t>(W, W - dx);
                        const std::int64_t len = xhi - xlo;
                        if (len <= 0) continue;
                        for (std::int64_t z = zlo; z < zhi; ++z) {
                            for (std::int64_t yy = ylo; yy < yhi; ++yy) {
                                T* yrow = yc + (z * H + yy) * W + xlo;
                                const T* xrow =
                                    xc + ((z + dz) * H + (yy + dy)) * W + xlo + dx;
                                for (std::int64_t i = 0; i < len; ++i)
                                    yrow[i] += wv * xrow[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_input(const Conv3dParams<T>& p, const Tensor4<T>& dy,
                           Tensor4<T>& dx) {
    const std::int64_t D = dy.d, H = dy.h, W = dy.w;
    const std::int64_t K = p.k, pad = (K - 1) / 2;
    dx = Tensor4<T>(p.cin, dy.d, dy.h, dy.w);
    for (std::uint32_t co = 0; co < p.cout; ++co) {
        for (std::uint32_t ci = 0; ci < p.cin; ++ci) {
            T* dxc = dx.channel(ci);
            const T* dyc = dy.channel(co);
            const T* wk =
                &p.w[(std::size_t(co) * p.cin + ci) * std::size_t(K * K * K)];
            for (std::int64_t kz = 0; kz < K; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < K; ++ky) {
                    const std::int64_t dyo = ky - pad;
                    for (std::int64_t kx = 0; kx < K; ++kx) {
                        const std::int64_t dxo = kx - pad;
                        const T wv = wk[(kz * K + ky) * K + kx];
                        const std::int64_t zlo = std::max<std::int64_t>(0, -dz);
                        const std::int64_t zhi = std::min<std::int64_t>(D, D - dz);
                        const std::int64_t ylo = std::max<std::int64_t>(0, -dyo);
                        const std::int64_t yhi = std::min<std::int64_t>(H, H - dyo);
                        const std::int64_t xlo = std::max<std::int64_t>(0, -dxo);
                        const std::int64_t xhi = std::min<std::int64_t>(W, W - dxo);
                        const std::int64_t len = xhi - xlo;
                        if (len <= 0) continue;
                        for (std::int64_t z = zlo; z < zhi; ++z) {
                            for (std::int64_t yy = ylo; yy < yhi; ++yy) {
                                const T* dyrow = dyc + (z * H + yy) * W + xlo;
                                T* dxrow =
                                    dxc + ((z + dz) * H + (yy + dyo)) * W + xlo + dxo;
                                for (std::int64_t i = 0; i < len; ++i)
                                    dxrow[i] += wv * dyrow[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_params(const Conv3dParams<T>& p, const Tensor4<T>& x,
                            const Tensor4<T>& dy, Conv3dParams<T>& grad) {
    const std::int64_t D = dy.d, H = dy.h, W = dy.w;
    const std::int64_t K = p.k, pad = (K - 1) / 2;
    for (std::uint32_t co = 0; co < p.cout; ++co) {
        const T* dyc = dy.channel(co);
        T dbacc = 0;
        for (std::size_t s = 0; s < dy.spatial(); ++s) dbacc += dyc[s];
        grad.b[co] += dbacc;
        for (std::uint32_t ci = 0; ci < p.cin; ++ci) {
            const T* xc = x.channel(ci);
            T* gwk =
                &grad.w[(std::size_t(co) * p.cin + ci) * std::size_t(K * K * K)];
            for (std::int64_t kz = 0; kz < K; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < K; ++ky) {
                    const std::int64_t dyo = ky - pad;
                    for (std::int64_t kx = 0; kx < K; ++kx) {
                        const std::int64_t dxo = kx - pad;
                        const std::int64_t zlo = std::max<std::int64_t>(0, -dz);
                        const std::int64_t zhi = std::min<std::int64_t>(D, D - dz);
                        const std::int64_t ylo = std::max<std::int64_t>(0, -dyo);
                        const std::int64_t yhi = std::min<std::int64_t>(H, H - dyo);
                        const std::int64_t xlo = std::max<std::int64_t>(0, -dxo);
                        const std::int64_t xhi = std::min<std::int64_t>(W, W - dxo);
                        const std::int64_t len = xhi - xlo;
                        if (len <= 0) continue;
                        T acc = 0;
                        for (std::int64_t z = zlo; z < zhi; ++z) {
                            for (std::int64_t yy = ylo; yy < yhi; ++yy) {
                                const T* dyrow = dyc + (z * H + yy) * W + xlo;
                                const T* xrow =
                                    xc + ((z + dz) * H + (yy + dyo)) * W + xlo + dxo;
                                for (std::int64_t i = 0; i < len; ++i)
                                    acc += dyrow[i] * xrow[i];
                            }
                        }
                        gwk[(kz * K + ky) * K + kx] += acc;
                    }
                }
            }
        }
    }
}

// ===========================================================================
// Affine coupling.
//
// Split channels into x_a (first half) and x_b. A small conv net maps x_a
// to (raw_s, t); the scale is s = exp(clamp * tanh(raw_s / clamp)), which
// bounds |log s| and makes zero-initialized output an exact identity.
//
//   y_a = x_a,  y_b = s * x_b + t,  logdet = sum clamp*tanh(raw_s/clamp)
//
// Subnet: conv3(C/2 -> hidden) relu conv1(hidden -> hidden) relu
//         conv3(hidden -> C, zero-initialized).
// ===========================================================================

template <typename T>
struct CouplingParams {
    Conv3dParams<T> conv1, conv2, conv3;
    T clamp = T(2);
};

template <typename T>
CouplingParams<T> coupling_init(std::uint32_t channels, std::uint32_t hidden,
                                T clamp, Rng* rng) {
    if (channels % 2 != 0)
        throw ShapeError("coupling needs an even channel count");
    const std::uint32_t half = channels / 2;
    CouplingParams<T> p;
    if (rng) {
        p.conv1 = conv3d_he<T>(half, hidden, 3, *rng);
        p.conv2 = conv3d_he<T>(hidden, hidden, 1, *rng);
    } else {
        p.conv1 = conv3d_zeros<T>(half, hidden, 3);
        p.conv2 = conv3d_zeros<T>(hidden, hidden, 1);
    }
    p.conv3 = conv3d_zeros<T>(hidden, channels, 3);  // identity at init
    p.clamp = clamp;
    return p;
}

template <typename T>
Tensor4<T> take_channels(const Tensor4<T>& x, std::uint32_t from,
                         std::uint32_t count) {
    Tensor4<T> out(count, x.d, x.h, x.w);
    std::memcpy(out.v.data(), x.channel(from), sizeof(T) * out.size());
    return out;
}

template <typename T>
struct CouplingCache {
    Tensor4<T> h1, h2;   ///< pre-activation hidden layers
    Tensor4<T> net;      ///< subnet output: raw_s then t
};

template <typename T>
void coupling_subnet_forward(const CouplingParams<T>& p, const Tensor4<T>& xa,
                             CouplingCache<T>& cache) {
    conv3d_forward(p.conv1, xa, cache.h1);
    Tensor4<T> a1 = cache.h1;
    for (auto& v : a1.v) v = v > T(0) ? v : T(0);
    conv3d_forward(p.conv2, a1, cache.h2);
    Tensor4<T> a2 = cache.h2;
    for (auto& v : a2.v) v = v > T(0) ? v : T(0);
    conv3d_forward(p.conv3, a2, cache.net);
}

template <typename T>
void coupling_forward(const CouplingParams<T>& p, const Tensor4<T>& x,
                      Tensor4<T>& y, T& logdet, CouplingCache<T>* cache_out) {
    if (x.c % 2 != 0) throw ShapeError("coupling needs an even channel count");
    const std::uint32_t half = x.c / 2;
    const std::size_t S = x.spatial();
    const Tensor4<T> xa = take_channels(x, 0, half);

    CouplingCache<T> local;
    CouplingCache<T>& cache = cache_out ? *cache_out : local;
    coupling_subnet_forward(p, xa, cache);

    y = Tensor4<T>(x.c, x.d, x.h, x.w);
    std::memcpy(y.v.data(), x.v.data(), sizeof(T) * half * S);  // y_a = x_a
    T ld = 0;
    for (std::uint32_t c = 0; c < half; ++c) {
        const T* raw = cache.net.channel(c);
        const T* t = cache.net.channel(half + c);
        const T* xb = x.channel(half + c);
        T* yb = y.channel(half + c);
        for (std::size_t s = 0; s < S; ++s) {
            const T g = p.clamp * std::tanh(raw[s] / p.clamp);
            yb[s] = std::exp(g) * xb[s] + t[s];
            ld += g;
        }
    }
    logdet = ld;
}

template <typename T>
void coupling_inverse(const CouplingParams<T>& p, const Tensor4<T>& y,
                      Tensor4<T>& x) {
    const std::uint32_t half = y.c / 2;
    const std::size_t S = y.spatial();
    const Tensor4<T> ya = take_channels(y, 0, half);
    CouplingCache<T> cache;
    coupling_subnet_forward(p, ya, cache);

    x = Tensor4<T>(y.c, y.d, y.h, y.w);
    std::memcpy(x.v.data(), y.v.data(), sizeof(T) * half * S);
    for (std::uint32_t c = 0; c < half; ++c) {
        const T* raw = cache.net.channel(c);
        const T* t = cache.net.channel(half + c);
        const T* yb = y.channel(half + c);
        T* xb = x.channel(half + c);
        for (std::size_t s = 0; s < S; ++s) {
            const T g = p.clamp * std::tanh(raw[s] / p.clamp);
            xb[s] = (yb[s] - t[s]) * std::exp(-g);
        }
    }
}

template <typename T>
void coupling_backward(const CouplingParams<T>& p, const Tensor4<T>& x,
                       const CouplingCache<T>& cache, const Tensor4<T>& dy,
                       T lambda, Tensor4<T>& dx, CouplingParams<T>& grad) {
    const std::uint32_t half = x.c / 2;
    const std::size_t S = x.spatial();

    // Gradient wrt the subnet output (raw_s, t).
    Tensor4<T> dnet(x.c, x.d, x.h, x.w);
    dx = Tensor4<T>(x.c, x.d, x.h, x.w);
    for (std::uint32_t c = 0; c < half; ++c) {
        const T* raw = cache.net.channel(c);
        const T* xb = x.channel(half + c);
        const T* dyb = dy.channel(half + c);
        T* draw = dnet.channel(c);
        T* dt = dnet.channel(half + c);
        T* dxb = dx.channel(half + c);
        for (std::size_t s = 0; s < S; ++s) {
            const T th = std::tanh(raw[s] / p.clamp);
            const T g = p.clamp * th;
            const T sc = std::exp(g);
            // dL/dg = dL/ds * s + lambda (logdet is sum of g)
            const T dg = dyb[s] * sc * xb[s] + lambda;
            draw[s] = dg * (T(1) - th * th);
            dt[s] = dyb[s];
            dxb[s] = dyb[s] * sc;
        }
    }

    // Subnet backward: conv3 <- relu <- conv2 <- relu <- conv1.
    Tensor4<T> a1 = cache.h1;
    for (auto& v : a1.v) v = v > T(0) ? v : T(0);
    Tensor4<T> a2 = cache.h2;
    for (auto& v : a2.v) v = v > T(0) ? v : T(0);

    conv3d_backward_params(p.conv3, a2, dnet, grad.conv3);
    Tensor4<T> da2;
    conv3d_backward_input(p.conv3, dnet, da2);
    for (std::size_t i = 0; i < da2.v.size(); ++i)
        if (cache.h2.v[i] <= T(0)) da2.v[i] = T(0);

    conv3d_backward_params(p.conv2, a1, da2, grad.conv2);
    Tensor4<T> da1;
    conv3d_backward_input(p.conv2, da2, da1);
    for (std::size_t i = 0; i < da1.v.size(); ++i)
        if (cache.h1.v[i] <= T(0)) da1.v[i] = T(0);

    const Tensor4<T> xa = take_channels(x, 0, half);
    conv3d_backward_params(p.conv1, xa, da1, grad.conv1);
    Tensor4<T> dxa_net;
    conv3d_backward_input(p.conv1, da1, dxa_net);

    // dx_a = dy_a (identity path) + subnet path.
    const T* dya = dy.v.data();
    T* dxa = dx.v.data();
    for (std::size_t i = 0; i < std::size_t(half) * S; ++i)
        dxa[i] = dya[i] + dxa_net.v[i];
}

// ===========================================================================
// Squeeze: trade spatial resolution for channels. Each 2x2x2 spatial
// block becomes 8 channels in (z, y, x)-lexicographic order:
// out channel c*8 + (dz*4 + dy*2 + dx). Pure permutation, logdet 0.
// ===========================================================================

template <typename T>
Tensor4<T> squeeze(const Tensor4<T>& x) {
    if (x.d % 2 || x.h % 2 || x.w % 2)
        throw ShapeError("squeeze needs even spatial dims");
    Tensor4<T> y(x.c * 8, x.d / 2, x.h / 2, x.w / 2);
    for (std::uint32_t c = 0; c < x.c; ++c) {
        for (std::uint32_t dz = 0; dz < 2; ++dz)
            for (std::uint32_t dy = 0; dy < 2; ++dy)
                for (std::uint32_t dx = 0; dx < 2; ++dx) {
                    const std::uint32_t oc = c * 8 + dz * 4 + dy * 2 + dx;
                    for (std::uint32_t z = 0; z < y.d; ++z)
                        for (std::uint32_t yy = 0; yy < y.h; ++yy)
                            for (std::uint32_t xx = 0; xx < y.w; ++xx)
                                y.at(oc, z, yy, xx) =
                                    x.at(c, 2 * z + dz, 2 * yy + dy, 2 * xx + dx);
                }
    }
    return y;
}

template <typename T>
Tensor4<T> unsqueeze(const Tensor4<T>& y) {
    if (y.c % 8) throw ShapeError("unsqueeze needs channels divisible by 8");
    Tensor4<T> x(y.c / 8, y.d * 2, y.h * 2, y.w * 2);
    for (std::uint32_t c = 0; c < x.c; ++c) {
        for (std::uint32_t dz = 0; dz < 2; ++dz)
            for (std::uint32_t dy = 0; dy < 2; ++dy)
                for (std::uint32_t dx = 0; dx < 2; ++dx) {
                    const std::uint32_t oc = c * 8 + dz * 4 + dy * 2 + dx;
                    for (std::uint32_t z = 0; z < y.d; ++z)
                        for (std::uint32_t yy = 0; yy < y.h; ++yy)
                            for (std::uint32_t xx = 0; xx < y.w; ++xx)
                                x.at(c, 2 * z + dz, 2 * yy + dy, 2 * xx + dx) =
                                    y.at(oc, z, yy, xx);
                }
    }
    return x;
}

// Channel-halving split; concatenation inverts it. logdet 0.
template <typename T>
void split_channels(const Tensor4<T>& x, Tensor4<T>& kept, Tensor4<T>& emitted) {
    if (x.c % 2) throw ShapeError("split needs an even channel count");
    kept = take_channels(x, 0, x.c / 2);
    emitted = take_channels(x, x.c / 2, x.c / 2);
}

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.d != b.d || a.h != b.h || a.w != b.w)
        throw ShapeError("concat needs matching spatial dims");
    Tensor4<T> out(a.c + b.c, a.d, a.h, a.w);
    std::memcpy(out.v.data(), a.v.data(), sizeof(T) * a.size());
    std::memcpy(out.v.data() + a.size(), b.v.data(), sizeof(T) * b.size());
    return out;
}

}  // namespace volflow
