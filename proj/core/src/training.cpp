#include "volflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <set>
#include <thread>

#include "volflow/errors.hpp"
#include "volflow/flow/checkpoint.hpp"

namespace volflow {

void validate(const TrainConfig& c) {
    if (c.batch_size == 0) throw ArgumentError("batch_size must be > 0");
    if (!(c.lr > 0)) throw ArgumentError("lr must be > 0");
    if (!(c.weight_decay >= 0)) throw ArgumentError("weight_decay must be >= 0");
    if (!(c.adam_beta1 > 0 && c.adam_beta1 < 1))
        throw ArgumentError("adam_beta1 must be in (0,1)");
    if (!(c.adam_beta2 > 0 && c.adam_beta2 < 1))
        throw ArgumentError("adam_beta2 must be in (0,1)");
    if (!(c.adam_eps > 0)) throw ArgumentError("adam_eps must be > 0");
    if (!(c.dequant_bin >= 0)) throw ArgumentError("dequant_bin must be >= 0");
    if (!(c.grad_clip_norm > 0))
        throw ArgumentError("grad_clip_norm must be > 0");
    if (c.log_every == 0) throw ArgumentError("log_every must be > 0");
    if (c.checkpoint_every == 0)
        throw ArgumentError("checkpoint_every must be > 0");
    if (c.threads == 0) throw ArgumentError("threads must be > 0");
}

TrainState make_train_state(const FlowConfig& cfg, std::uint64_t seed) {
    TrainState st{FlowModel<double>(cfg, InitMode::Random, seed), {}, {}, 0, {}};
    st.m1 = zeros_like(st.model.params);
    st.m2 = zeros_like(st.model.params);
    return st;
}

namespace {

std::vector<std::vector<double>*> collect(FlowParams<double>& p) {
    std::vector<std::vector<double>*> out;
    for_each_param(p, [&](const std::string&, std::vector<double>& v) {
        out.push_back(&v);
    });
    return out;
}

std::vector<const std::vector<double>*> collect(const FlowParams<double>& p) {
    std::vector<const std::vector<double>*> out;
    for_each_param(p, [&](const std::string&, const std::vector<double>& v) {
        out.push_back(&v);
    });
    return out;
}

FlowParams<long double> widen_params(const FlowParams<double>& p) {
    auto vec = [](const std::vector<double>& v) {
        return std::vector<long double>(v.begin(), v.end());
    };
    auto conv = [&](const Conv3dParams<double>& c) {
        Conv3dParams<long double> r;
        r.cin = c.cin;
        r.cout = c.cout;
        r.k = c.k;
        r.w = vec(c.w);
        r.b = vec(c.b);
        return r;
    };
    FlowParams<long double> out;
    out.levels.resize(p.levels.size());
    for (std::size_t l = 0; l < p.levels.size(); ++l) {
        out.levels[l].resize(p.levels[l].size());
        for (std::size_t k = 0; k < p.levels[l].size(); ++k) {
            const auto& s = p.levels[l][k];
            auto& o = out.levels[l][k];
            o.actnorm.log_scale = vec(s.actnorm.log_scale);
            o.actnorm.bias = vec(s.actnorm.bias);
            o.actnorm.initialized = s.actnorm.initialized;
            o.invconv.channels = s.invconv.channels;
            o.invconv.perm = s.invconv.perm;
            o.invconv.sign = vec(s.invconv.sign);
            o.invconv.lower = vec(s.invconv.lower);
            o.invconv.upper = vec(s.invconv.upper);
            o.invconv.log_s = vec(s.invconv.log_s);
            o.coupling.conv1 = conv(s.coupling.conv1);
            o.coupling.conv2 = conv(s.coupling.conv2);
            o.coupling.conv3 = conv(s.coupling.conv3);
            o.coupling.clamp = (long double)s.coupling.clamp;
        }
    }
    return out;
}

constexpr double kLn2 = 0.6931471805599453;
constexpr double kLogTwoPi = 1.8378770664093453;

double prior_nats(const LatentBundle<double>& z) {
    double prior = 0;
    for (const auto& t : z.tensors)
        for (const double v : t.v) prior += -0.5 * v * v - 0.5 * kLogTwoPi;
    return prior;
}

}  // namespace

VolumePatchSource::VolumePatchSource(std::vector<Volume> volumes,
                                     std::vector<Mask> masks,
                                     std::uint32_t patch_edge,
                                     double min_mask_fraction,
                                     std::uint64_t seed)
    : volumes_(std::move(volumes)), edge_(patch_edge), rng_(seed) {
    if (volumes_.empty()) throw ArgumentError("patch source needs volumes");
    if (masks.size() != volumes_.size())
        throw ArgumentError("volume and mask counts differ");
    for (std::size_t i = 0; i < volumes_.size(); ++i) {
        const auto& v = volumes_[i];
        if (v.value_space != ValueSpace::Normalized)
            throw ArgumentError("training volumes must be normalized");
        if (v.dims.d < edge_ || v.dims.h < edge_ || v.dims.w < edge_)
            throw ShapeError("volume smaller than the patch edge");
        samplers_.emplace_back(v.dims, masks[i], edge_, min_mask_fraction);
    }
}

Tensor4<double> VolumePatchSource::next() {
    const std::size_t vi = rng_.uniform_index(volumes_.size());
    const Origin o = samplers_[vi].draw(rng_);
    const Patch p = extract_patch(volumes_[vi], o, edge_);
    Tensor4<double> t(1, edge_, edge_, edge_);
    for (std::size_t i = 0; i < p.data.size(); ++i) t.v[i] = double(p.data[i]);
    return t;
}

double nll_loss(const FlowModel<double>& model,
                const std::vector<Tensor4<double>>& batch, double dequant_bin,
                Rng& noise) {
    if (batch.empty()) throw ArgumentError("empty batch");
    if (dequant_bin < 0) throw ArgumentError("dequant_bin must be >= 0");
    double acc = 0;
    for (const auto& x : batch) {
        Tensor4<double> noisy = x;
        for (auto& v : noisy.v) v += noise.uniform() * dequant_bin;
        acc += model.log_prob(noisy).bits_per_dim;
    }
    const double loss = acc / double(batch.size());
    if (!std::isfinite(loss)) throw NumericError("non-finite nll loss");
    return loss;
}

BatchGradResult nll_loss_and_grad(const FlowModel<double>& model,
                                  const std::vector<Tensor4<double>>& batch,
                                  FlowParams<double>& grads,
                                  std::uint32_t threads) {
    const std::size_t B = batch.size();
    if (B == 0) throw ArgumentError("empty batch");
    const std::size_t n = batch[0].size();
    for (const auto& x : batch)
        if (x.size() != n) throw ShapeError("ragged batch");
    const double omega = 1.0 / (double(B) * double(n) * kLn2);

    // Per-sample gradients land in their own slot; the fold below runs in
    // sample order, so the result is independent of the thread count.
    std::vector<FlowParams<double>> slot(B);
    std::vector<double> nats(B, 0.0);
    auto run_sample = [&](std::size_t i) {
        slot[i] = zeros_like(model.params);
        ForwardCache<double> cache;
        double logdet = 0;
        auto z = model.forward_cached(batch[i], logdet, cache);
        nats[i] = prior_nats(z) + logdet;
        for (auto& t : z.tensors)
            for (auto& v : t.v) v *= omega;
        model.backward(cache, z, -omega, slot[i]);
    };

    const std::size_t workers = std::min<std::size_t>(threads, B);
    if (workers <= 1) {
        for (std::size_t i = 0; i < B; ++i) run_sample(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errs(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < B; i += workers) run_sample(i);
                } catch (...) {
                    errs[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (const auto& e : errs)
            if (e) std::rethrow_exception(e);
    }

    auto dst = collect(grads);
    for (std::size_t i = 0; i < B; ++i) {
        const auto src = collect(slot[i]);
        if (src.size() != dst.size()) throw ShapeError("gradient shape mismatch");
        for (std::size_t a = 0; a < dst.size(); ++a) {
            if (src[a]->size() != dst[a]->size())
                throw ShapeError("gradient shape mismatch");
            for (std::size_t j = 0; j < src[a]->size(); ++j)
                (*dst[a])[j] += (*src[a])[j];
        }
    }

    double loss = 0;
    for (std::size_t i = 0; i < B; ++i) loss += -nats[i] * omega;
    double sq = 0;
    for (const auto* a : dst)
        for (const double g : *a) sq += g * g;

    BatchGradResult r;
    r.bits_per_dim = loss;
    r.grad_norm = std::sqrt(sq);
    return r;
}

double grad_check(const FlowModel<double>& model, const Tensor4<double>& x,
                  std::size_t min_params, std::uint64_t seed) {
    FlowModel<double> m = model;
    const double n = double(x.size());
    const double omega = 1.0 / (n * kLn2);

    FlowParams<double> grads = zeros_like(m.params);
    {
        ForwardCache<double> cache;
        double logdet = 0;
        auto z = m.forward_cached(x, logdet, cache);
        for (auto& t : z.tensors)
            for (auto& v : t.v) v *= omega;
        m.backward(cache, z, -omega, grads);
    }
    // The finite differences run in extended precision: at step size
    // 1e-5 the loss difference for a small-magnitude gradient component
    // sits below the double rounding floor of the full forward pass.
    FlowModel<long double> fm;
    fm.config = m.config;
    fm.params = widen_params(m.params);
    Tensor4<long double> xl(x.c, x.d, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) xl.v[i] = x.v[i];
    const long double ln2l = std::log(2.0L);
    const long double l2pi = std::log(2.0L * 3.14159265358979323846L);
    auto loss = [&]() -> long double {
        long double logdet = 0;
        const auto z = fm.forward(xl, logdet);
        long double prior = 0;
        std::size_t dims = 0;
        for (const auto& t : z.tensors) {
            for (const long double v : t.v) prior += -0.5L * v * v;
            dims += t.size();
        }
        prior -= 0.5L * l2pi * (long double)dims;
        return -(prior + logdet) / ((long double)dims * ln2l);
    };

    std::vector<std::vector<long double>*> arrays;
    for_each_param(fm.params,
                   [&](const std::string&, std::vector<long double>& v) {
                       arrays.push_back(&v);
                   });
    const auto ganalytic = collect(static_cast<const FlowParams<double>&>(grads));
    std::size_t total = 0;
    for (const auto* a : arrays) total += a->size();

    std::set<std::size_t> picked;
    const std::size_t want = std::min(min_params, total);
    if (want == total) {
        for (std::size_t i = 0; i < total; ++i) picked.insert(i);
    } else {
        Rng rng(Rng::derive(seed, 0x6c));
        while (picked.size() < want) picked.insert(rng.uniform_index(total));
    }

    double max_rel = 0;
    for (const std::size_t idx : picked) {
        std::size_t a = 0, off = idx;
        while (off >= arrays[a]->size()) off -= arrays[a++]->size();
        long double& theta = (*arrays[a])[off];
        const long double theta0 = theta;
        const long double h = 1e-5L * (std::fabs((double)theta0) + 1.0);
        theta = theta0 + h;
        const long double lp = loss();
        theta = theta0 - h;
        const long double lm = loss();
        theta = theta0;
        const double numeric = double((lp - lm) / (2.0L * h));
        const double analytic = (*ganalytic[a])[off];
        const double denom = std::max(
            {std::fabs(analytic), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    }
    return max_rel;
}

void adam_step(TrainState& state, const FlowParams<double>& grads,
               const TrainConfig& cfg) {
    auto params = collect(state.model.params);
    auto m1 = collect(state.m1);
    auto m2 = collect(state.m2);
    const auto g = collect(grads);
    if (g.size() != params.size() || m1.size() != params.size() ||
        m2.size() != params.size())
        throw ShapeError("optimizer state shape mismatch");

    double sq = 0;
    for (std::size_t a = 0; a < g.size(); ++a) {
        if (g[a]->size() != params[a]->size() ||
            m1[a]->size() != params[a]->size() ||
            m2[a]->size() != params[a]->size())
            throw ShapeError("optimizer state shape mismatch");
        for (const double v : *g[a]) {
            if (!std::isfinite(v)) throw NumericError("non-finite gradient");
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    const double scale =
        norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / norm : 1.0;

    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    const std::uint64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(t));
    for (std::size_t a = 0; a < params.size(); ++a) {
        auto& th = *params[a];
        auto& ma = *m1[a];
        auto& va = *m2[a];
        const auto& ga = *g[a];
        for (std::size_t j = 0; j < th.size(); ++j) {
            th[j] *= decay;
            const double gj = ga[j] * scale;
            ma[j] = cfg.adam_beta1 * ma[j] + (1.0 - cfg.adam_beta1) * gj;
            va[j] = cfg.adam_beta2 * va[j] + (1.0 - cfg.adam_beta2) * gj * gj;
            th[j] -= cfg.lr * (ma[j] / bc1) / (std::sqrt(va[j] / bc2) +
                                               cfg.adam_eps);
        }
    }
    state.step = t;
}

TrainState train(PatchSource& source, const FlowConfig& fcfg,
                 const TrainConfig& cfg, const std::string& checkpoint_path,
                 const std::string& log_csv_path) {
    validate(cfg);
    TrainState state = make_train_state(fcfg, cfg.seed);
    Rng noise(Rng::derive(cfg.seed, 0xde9));

    auto draw_batch = [&]() {
        std::vector<Tensor4<double>> batch;
        batch.reserve(cfg.batch_size);
        for (std::uint32_t i = 0; i < cfg.batch_size; ++i) {
            batch.push_back(source.next());
            for (auto& v : batch.back().v)
                v += noise.uniform() * cfg.dequant_bin;
        }
        return batch;
    };

    state.model.init_actnorm(draw_batch());
    save_checkpoint(checkpoint_path, state.model);

    std::ofstream log;
    if (!log_csv_path.empty()) {
        log.open(log_csv_path, std::ios::trunc);
        if (!log) throw IoError("cannot open for writing: " + log_csv_path);
        log << "step,bits_per_dim,grad_norm,wallclock_s\n";
        log << std::setprecision(17);
    }

    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint32_t step = 1; step <= cfg.iterations; ++step) {
        const auto batch = draw_batch();
        FlowParams<double> grads = zeros_like(state.model.params);
        const auto res =
            nll_loss_and_grad(state.model, batch, grads, cfg.threads);
        if (!std::isfinite(res.bits_per_dim))
            throw NumericError("non-finite loss at step " +
                               std::to_string(step));
        state.bpd_history.push_back(res.bits_per_dim);
        try {
            adam_step(state, grads, cfg);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at step " +
                               std::to_string(step));
        }
        if (log && (step == 1 || step % cfg.log_every == 0 ||
                    step == cfg.iterations)) {
            const std::chrono::duration<double> dt =
                std::chrono::steady_clock::now() - t0;
            log << step << ',' << res.bits_per_dim << ',' << res.grad_norm
                << ',' << dt.count() << '\n';
            log.flush();
        }
        if (step % cfg.checkpoint_every == 0)
            save_checkpoint(checkpoint_path, state.model);
    }
    save_checkpoint(checkpoint_path, state.model);
    return state;
}

}  // namespace volflow
