#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volflow/flow/layers.hpp"

namespace volflow {

// ===========================================================================
// Multi-scale flow over cubic patches.
//
// Each level: squeeze, then `flows` steps of (actnorm, invertible 1x1x1
// conv, affine coupling), then a channel split that sends half the
// channels straight to the latent bundle. The last level keeps
// everything. Total element count is conserved throughout.
// ===========================================================================

struct FlowConfig {
    std::uint32_t levels = 4;
    std::uint32_t flows = 64;
    std::uint32_t patch_edge = 48;
    std::uint32_t in_channels = 1;
    std::uint32_t coupling_hidden = 32;
    float scale_clamp = 2.0f;
};

inline void validate(const FlowConfig& c) {
    if (c.levels < 1) throw ArgumentError("levels must be >= 1");
    if (c.flows < 1) throw ArgumentError("flows must be >= 1");
    if (c.in_channels < 1) throw ArgumentError("in_channels must be >= 1");
    if (c.coupling_hidden < 1) throw ArgumentError("coupling_hidden must be >= 1");
    if (!(c.scale_clamp > 0)) throw ArgumentError("scale_clamp must be > 0");
    const std::uint32_t div = 1u << c.levels;
    if (c.patch_edge == 0 || c.patch_edge % div != 0)
        throw ArgumentError("patch_edge must be a positive multiple of 2^levels");
}

struct LevelShape {
    std::uint32_t channels;  ///< post-squeeze channel count
    std::uint32_t edge;      ///< post-squeeze spatial edge
};

/// Post-squeeze shape at each level.
inline std::vector<LevelShape> level_shapes(const FlowConfig& c) {
    std::vector<LevelShape> out;
    std::uint32_t ch = c.in_channels, edge = c.patch_edge;
    for (std::uint32_t l = 0; l < c.levels; ++l) {
        ch *= 8;
        edge /= 2;
        out.push_back({ch, edge});
        ch /= 2;  // split keeps half (not applied at the last level)
    }
    return out;
}

/// Shapes of the latent bundle entries, in emission order.
inline std::vector<LevelShape> latent_shapes(const FlowConfig& c) {
    auto ls = level_shapes(c);
    std::vector<LevelShape> out;
    for (std::uint32_t l = 0; l < c.levels; ++l) {
        if (l + 1 < c.levels)
            out.push_back({ls[l].channels / 2, ls[l].edge});
        else
            out.push_back(ls[l]);
    }
    return out;
}

template <typename T>
struct FlowStepParams {
    ActNormParams<T> actnorm;
    InvConvParams<T> invconv;
    CouplingParams<T> coupling;
};

template <typename T>
struct FlowParams {
    std::vector<std::vector<FlowStepParams<T>>> levels;  ///< [level][flow]
};

enum class InitMode {
    Identity,  ///< every layer is the identity map (tests, debugging)
    Random,    ///< orthogonal invconv, He subnet, actnorm pending data init
};

template <typename T>
FlowParams<T> init_flow_params(const FlowConfig& cfg, InitMode mode,
                               std::uint64_t seed) {
    validate(cfg);
    const auto shapes = level_shapes(cfg);
    FlowParams<T> p;
    p.levels.resize(cfg.levels);
    std::uint64_t stream = 0;
    for (std::uint32_t l = 0; l < cfg.levels; ++l) {
        p.levels[l].resize(cfg.flows);
        for (std::uint32_t k = 0; k < cfg.flows; ++k) {
            const std::uint32_t ch = shapes[l].channels;
            auto& step = p.levels[l][k];
            if (mode == InitMode::Identity) {
                step.actnorm = actnorm_identity<T>(ch);
                step.invconv = invconv_identity<T>(ch);
                step.coupling =
                    coupling_init<T>(ch, cfg.coupling_hidden,
                                     T(cfg.scale_clamp), nullptr);
            } else {
                step.actnorm.log_scale.assign(ch, T(0));
                step.actnorm.bias.assign(ch, T(0));
                step.actnorm.initialized = false;
                step.invconv =
                    invconv_random<T>(ch, Rng::derive(seed, 2 * stream));
                Rng rng(Rng::derive(seed, 2 * stream + 1));
                step.coupling =
                    coupling_init<T>(ch, cfg.coupling_hidden,
                                     T(cfg.scale_clamp), &rng);
            }
            ++stream;
        }
    }
    return p;
}

/// Visit every trainable tensor in a fixed, documented order:
/// levels outer-to-inner, flows in order, then within each step
/// actnorm (log_scale, bias), invconv (lower, upper, log_s),
/// coupling (conv1.w, conv1.b, conv2.w, conv2.b, conv3.w, conv3.b).
/// Optimizer state, gradient checks, and checkpoints all rely on
/// this order being stable.
template <typename T, typename F>
void for_each_param(FlowParams<T>& p, F&& f) {
    for (std::size_t l = 0; l < p.levels.size(); ++l) {
        for (std::size_t k = 0; k < p.levels[l].size(); ++k) {
            const std::string base =
                "level" + std::to_string(l) + ".flow" + std::to_string(k) + ".";
            auto& s = p.levels[l][k];
            f(base + "actnorm.log_scale", s.actnorm.log_scale);
            f(base + "actnorm.bias", s.actnorm.bias);
            f(base + "invconv.lower", s.invconv.lower);
            f(base + "invconv.upper", s.invconv.upper);
            f(base + "invconv.log_s", s.invconv.log_s);
            f(base + "coupling.conv1.w", s.coupling.conv1.w);
            f(base + "coupling.conv1.b", s.coupling.conv1.b);
            f(base + "coupling.conv2.w", s.coupling.conv2.w);
            f(base + "coupling.conv2.b", s.coupling.conv2.b);
            f(base + "coupling.conv3.w", s.coupling.conv3.w);
            f(base + "coupling.conv3.b", s.coupling.conv3.b);
        }
    }
}

template <typename T, typename F>
void for_each_param(const FlowParams<T>& p, F&& f) {
    for_each_param(const_cast<FlowParams<T>&>(p),
                   [&](const std::string& name, std::vector<T>& v) {
                       f(name, static_cast<const std::vector<T>&>(v));
                   });
}

template <typename T>
std::size_t param_count(const FlowParams<T>& p) {
    std::size_t n = 0;
    for_each_param(p, [&](const std::string&, const std::vector<T>& v) {
        n += v.size();
    });
    return n;
}

/// Same structure as `like`, every trainable zeroed (frozen perm/sign
/// copied so shapes stay interpretable).
template <typename T>
FlowParams<T> zeros_like(const FlowParams<T>& like) {
    FlowParams<T> out = like;
    for_each_param(out, [](const std::string&, std::vector<T>& v) {
        std::fill(v.begin(), v.end(), T(0));
    });
    return out;
}

template <typename T>
struct LatentBundle {
    std::vector<Tensor4<T>> tensors;

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }
};

/// Log density of one patch under the flow, reported in three units.
struct LogDensity {
    double nats = 0;
    double per_dim_nats = 0;
    double bits_per_dim = 0;
};

inline LogDensity make_log_density(double nats, std::size_t dims) {
    LogDensity d;
    d.nats = nats;
    d.per_dim_nats = nats / double(dims);
    d.bits_per_dim = -d.per_dim_nats / std::log(2.0);
    return d;
}

template <typename T>
struct StepCache {
    Tensor4<T> x_in;   ///< actnorm input
    Tensor4<T> x_an;   ///< invconv input
    Tensor4<T> x_ic;   ///< coupling input
    CouplingCache<T> coup;
};

template <typename T>
struct ForwardCache {
    std::vector<std::vector<StepCache<T>>> levels;
};

template <typename T>
class FlowModel {
  public:
    FlowConfig config;
    FlowParams<T> params;

    FlowModel() = default;
    FlowModel(const FlowConfig& cfg, InitMode mode, std::uint64_t seed)
        : config(cfg), params(init_flow_params<T>(cfg, mode, seed)) {}

    bool actnorm_initialized() const {
        for (const auto& lv : params.levels)
            for (const auto& s : lv)
                if (!s.actnorm.initialized) return false;
        return true;
    }

    LatentBundle<T> forward(const Tensor4<T>& x, T& total_logdet) const {
        return run_forward(x, total_logdet, nullptr);
    }

    LatentBundle<T> forward_cached(const Tensor4<T>& x, T& total_logdet,
                                   ForwardCache<T>& cache) const {
        return run_forward(x, total_logdet, &cache);
    }

    Tensor4<T> inverse(const LatentBundle<T>& z) const {
        const auto want = latent_shapes(config);
        if (z.tensors.size() != want.size())
            throw ShapeError("latent bundle has wrong tensor count");
        for (std::size_t i = 0; i < want.size(); ++i) {
            const auto& t = z.tensors[i];
            if (t.c != want[i].channels || t.d != want[i].edge ||
                t.h != want[i].edge || t.w != want[i].edge)
                throw ShapeError("latent tensor " + std::to_string(i) +
                                 " has wrong shape");
        }
        const std::uint32_t L = config.levels;
        Tensor4<T> cur = z.tensors[L - 1];
        for (std::uint32_t li = L; li-- > 0;) {
            if (li != L - 1) cur = concat_channels(cur, z.tensors[li]);
            for (std::uint32_t k = config.flows; k-- > 0;) {
                const auto& s = params.levels[li][k];
                Tensor4<T> t1, t2;
                coupling_inverse(s.coupling, cur, t1);
                invconv_inverse(s.invconv, t1, t2);
                actnorm_inverse(s.actnorm, t2, cur);
            }
            cur = unsqueeze(cur);
        }
        return cur;
    }

    LogDensity log_prob(const Tensor4<T>& x) const {
        T logdet = 0;
        const auto z = run_forward(x, logdet, nullptr);
        static const double kLogTwoPi = std::log(2.0 * 3.14159265358979323846);
        double prior = 0;
        std::size_t n = 0;
        for (const auto& t : z.tensors) {
            for (const T v : t.v)
                prior += -0.5 * double(v) * double(v) - 0.5 * kLogTwoPi;
            n += t.size();
        }
        return make_log_density(prior + double(logdet), n);
    }

    Tensor4<T> sample(Rng& rng, T temperature) const {
        LatentBundle<T> z;
        for (const auto& s : latent_shapes(config)) {
            Tensor4<T> t(s.channels, s.edge, s.edge, s.edge);
            for (auto& v : t.v) v = temperature * T(rng.normal());
            z.tensors.push_back(std::move(t));
        }
        return inverse(z);
    }

    /// Reverse-mode pass. `dz` holds dLoss/d(latent) per bundle entry and
    /// `lambda` is dLoss/d(total logdet); parameter gradients accumulate
    /// into `grads` (shaped like `params`). Returns dLoss/dx.
    Tensor4<T> backward(const ForwardCache<T>& cache,
                        const LatentBundle<T>& dz, T lambda,
                        FlowParams<T>& grads) const {
        const std::uint32_t L = config.levels;
        Tensor4<T> g;
        for (std::uint32_t li = L; li-- > 0;) {
            if (li == L - 1)
                g = dz.tensors[li];
            else
                g = concat_channels(unsqueeze(g), dz.tensors[li]);
            for (std::uint32_t k = config.flows; k-- > 0;) {
                const auto& s = params.levels[li][k];
                const auto& c = cache.levels[li][k];
                Tensor4<T> d1, d2, d3;
                coupling_backward(s.coupling, c.x_ic, c.coup, g, lambda, d1,
                                  grads.levels[li][k].coupling);
                invconv_backward(s.invconv, c.x_an, d1, lambda, d2,
                                 grads.levels[li][k].invconv);
                actnorm_backward(s.actnorm, c.x_in, d2, lambda, d3,
                                 grads.levels[li][k].actnorm);
                g = std::move(d3);
            }
        }
        return unsqueeze(g);
    }

    /// Data-dependent actnorm init. Streams the batch through the model,
    /// initializing each actnorm from the activations that reach it.
    void init_actnorm(const std::vector<Tensor4<T>>& batch) {
        if (batch.size() < 2)
            throw InitError("actnorm init needs at least 2 samples");
        std::vector<Tensor4<T>> cur(batch.begin(), batch.end());
        for (std::uint32_t li = 0; li < config.levels; ++li) {
            for (auto& t : cur) t = squeeze(t);
            for (std::uint32_t k = 0; k < config.flows; ++k) {
                auto& s = params.levels[li][k];
                if (!s.actnorm.initialized) {
                    std::vector<const Tensor4<T>*> ptrs;
                    for (const auto& t : cur) ptrs.push_back(&t);
                    s.actnorm = actnorm_init_from<T>(ptrs);
                }
                for (auto& t : cur) {
                    Tensor4<T> t1, t2, t3;
                    T ld;
                    actnorm_forward(s.actnorm, t, t1, ld);
                    invconv_forward(s.invconv, t1, t2, ld);
                    coupling_forward(s.coupling, t2, t3, ld,
                                     static_cast<CouplingCache<T>*>(nullptr));
                    t = std::move(t3);
                }
            }
            if (li + 1 < config.levels) {
                for (auto& t : cur) {
                    Tensor4<T> kept, emitted;
                    split_channels(t, kept, emitted);
                    t = std::move(kept);
                }
            }
        }
    }

  private:
    LatentBundle<T> run_forward(const Tensor4<T>& x, T& total_logdet,
                                ForwardCache<T>* cache) const {
        if (x.c != config.in_channels || x.d != config.patch_edge ||
            x.h != config.patch_edge || x.w != config.patch_edge)
            throw ShapeError("input tensor does not match the model config");
        if (!actnorm_initialized())
            throw InitError("actnorm parameters are not initialized");
        if (cache) {
            cache->levels.assign(config.levels,
                                 std::vector<StepCache<T>>(config.flows));
        }
        LatentBundle<T> z;
        z.tensors.resize(config.levels);
        Tensor4<T> cur = x;
        T logdet = 0;
        for (std::uint32_t li = 0; li < config.levels; ++li) {
            cur = squeeze(cur);
            for (std::uint32_t k = 0; k < config.flows; ++k) {
                const auto& s = params.levels[li][k];
                StepCache<T>* sc = cache ? &cache->levels[li][k] : nullptr;
                Tensor4<T> t1, t2, t3;
                T ld;
                actnorm_forward(s.actnorm, cur, t1, ld);
                logdet += ld;
                invconv_forward(s.invconv, t1, t2, ld);
                logdet += ld;
                coupling_forward(s.coupling, t2, t3, ld,
                                 sc ? &sc->coup : nullptr);
                logdet += ld;
                if (sc) {
                    sc->x_in = std::move(cur);
                    sc->x_an = std::move(t1);
                    sc->x_ic = std::move(t2);
                }
                cur = std::move(t3);
            }
            if (li + 1 < config.levels) {
                Tensor4<T> kept;
                split_channels(cur, kept, z.tensors[li]);
                cur = std::move(kept);
            } else {
                z.tensors[li] = std::move(cur);
            }
        }
        total_logdet = logdet;
        return z;
    }
};

}  // namespace volflow
