#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "volflow/flow/checkpoint.hpp"
#include "volflow/training.hpp"

using namespace volflow;
using oracles::rand_tensor;

namespace {

FlowConfig tiny_config() {
    FlowConfig c;
    c.levels = 2;
    c.flows = 2;
    c.patch_edge = 8;
    c.in_channels = 1;
    c.coupling_hidden = 8;
    c.scale_clamp = 2.0f;
    return c;
}

FlowModel<double> initialized_tiny(std::uint64_t seed) {
    FlowModel<double> m(tiny_config(), InitMode::Random, seed);
    Rng rng(Rng::derive(seed, 5));
    std::vector<Tensor4<double>> init;
    for (int i = 0; i < 4; ++i)
        init.push_back(rand_tensor<double>(1, 8, 8, 8, rng, 0.25));
    m.init_actnorm(init);
    return m;
}

Volume normalized_volume(Dims dims, std::uint64_t seed) {
    Volume v;
    v.dims = dims;
    v.spacing = {2.0f, 2.0f, 2.0f};
    v.value_space = ValueSpace::Normalized;
    v.voxels.resize(dims.count());
    Rng rng(seed);
    for (auto& x : v.voxels) x = float(rng.uniform(-0.5, 0.5));
    return v;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("volflow_train_test_" + std::to_string(std::rand()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("nll of zeros under the identity model is the gaussian constant") {
    FlowModel<double> m(tiny_config(), InitMode::Identity, 0);
    Tensor4<double> x(1, 8, 8, 8);
    x.v.assign(x.size(), 0.0);
    Rng noise(1);
    const double bpd = nll_loss(m, {x, x}, 0.0, noise);
    // -log2 N(0; 0, 1) per dimension = log(2*pi) / (2 log 2)
    CHECK(bpd == doctest::Approx(1.3257480647361593).epsilon(1e-12));
}

TEST_CASE("dequantization consumes the noise stream even at bin zero") {
    FlowModel<double> m(tiny_config(), InitMode::Identity, 0);
    Rng rng(71);
    std::vector<Tensor4<double>> batch;
    for (int i = 0; i < 2; ++i)
        batch.push_back(rand_tensor<double>(1, 8, 8, 8, rng, 0.25));

    Rng a(555), b(555);
    (void)nll_loss(m, batch, 0.0, a);
    (void)nll_loss(m, batch, 1e-3, b);
    // Both calls must advance the stream identically.
    CHECK(a.next_u64() == b.next_u64());

    // And bin = 0 leaves the data untouched: loss equals the noise-free value.
    Rng c(556), d(557);
    CHECK(nll_loss(m, batch, 0.0, c) == nll_loss(m, batch, 0.0, d));
}

TEST_CASE("batch gradients are bit-identical across thread counts") {
    auto m = initialized_tiny(81);
    Rng rng(82);
    std::vector<Tensor4<double>> batch;
    for (int i = 0; i < 5; ++i)
        batch.push_back(rand_tensor<double>(1, 8, 8, 8, rng, 0.25));

    auto g1 = zeros_like(m.params);
    auto g2 = zeros_like(m.params);
    auto g4 = zeros_like(m.params);
    const auto r1 = nll_loss_and_grad(m, batch, g1, 1);
    const auto r2 = nll_loss_and_grad(m, batch, g2, 2);
    const auto r4 = nll_loss_and_grad(m, batch, g4, 4);

    CHECK(r1.bits_per_dim == r2.bits_per_dim);
    CHECK(r1.bits_per_dim == r4.bits_per_dim);
    CHECK(r1.grad_norm == r2.grad_norm);
    CHECK(r1.grad_norm == r4.grad_norm);

    std::vector<double> v1, v2, v4;
    for_each_param(g1, [&](const std::string&, std::vector<double>& v) {
        v1.insert(v1.end(), v.begin(), v.end());
    });
    for_each_param(g2, [&](const std::string&, std::vector<double>& v) {
        v2.insert(v2.end(), v.begin(), v.end());
    });
    for_each_param(g4, [&](const std::string&, std::vector<double>& v) {
        v4.insert(v4.end(), v.begin(), v.end());
    });
    CHECK(v1 == v2);
    CHECK(v1 == v4);
}

TEST_CASE("analytic gradients agree with finite differences") {
    auto m = initialized_tiny(83);
    Rng rng(84);
    auto x = rand_tensor<double>(1, 8, 8, 8, rng, 0.25);
    CHECK(grad_check(m, x, 200, 17) < 1e-4);
}

TEST_CASE("adam step with zero gradients") {
    TrainState st = make_train_state(tiny_config(), 91);
    Rng rng(92);
    std::vector<Tensor4<double>> init;
    for (int i = 0; i < 4; ++i)
        init.push_back(rand_tensor<double>(1, 8, 8, 8, rng, 0.25));
    st.model.init_actnorm(init);

    auto snapshot = [&]() {
        std::vector<double> all;
        for_each_param(st.model.params,
                       [&](const std::string&, std::vector<double>& v) {
                           all.insert(all.end(), v.begin(), v.end());
                       });
        return all;
    };

    const auto before = snapshot();
    auto zero = zeros_like(st.model.params);
    TrainConfig cfg;
    cfg.lr = 0.1;

    SUBCASE("no weight decay leaves parameters untouched") {
        cfg.weight_decay = 0.0;
        adam_step(st, zero, cfg);
        CHECK(snapshot() == before);
        CHECK(st.step == 1);
    }

    SUBCASE("decoupled weight decay contracts by exactly 1 - lr*wd") {
        cfg.weight_decay = 0.5;
        adam_step(st, zero, cfg);
        const auto after = snapshot();
        REQUIRE(after.size() == before.size());
        for (std::size_t i = 0; i < before.size(); ++i)
            CHECK(after[i] == doctest::Approx(before[i] * 0.95).epsilon(1e-15));
    }
}

TEST_CASE("make_train_state starts with zeroed moments") {
    TrainState st = make_train_state(tiny_config(), 93);
    CHECK(st.step == 0);
    CHECK(st.bpd_history.empty());
    for_each_param(st.m1, [](const std::string&, std::vector<double>& v) {
        for (double x : v) CHECK(x == 0.0);
    });
    for_each_param(st.m2, [](const std::string&, std::vector<double>& v) {
        for (double x : v) CHECK(x == 0.0);
    });
    CHECK(param_count(st.m1) == param_count(st.model.params));
}

TEST_CASE("adam step rejects non-finite gradients without touching state") {
    TrainState st = make_train_state(tiny_config(), 94);
    Rng rng(95);
    std::vector<Tensor4<double>> init;
    for (int i = 0; i < 4; ++i)
        init.push_back(rand_tensor<double>(1, 8, 8, 8, rng, 0.25));
    st.model.init_actnorm(init);

    auto bad = zeros_like(st.model.params);
    bad.levels[0][0].actnorm.bias[0] = std::nan("");
    TrainConfig cfg;
    CHECK_THROWS_AS(adam_step(st, bad, cfg), NumericError);
    CHECK(st.step == 0);
}

TEST_CASE("volume patch source draws deterministic in-mask patches") {
    const Dims dims{24, 24, 24};
    std::vector<Volume> vols{normalized_volume(dims, 101),
                             normalized_volume(dims, 102)};
    std::vector<Mask> masks{make_mask(dims, true), make_mask(dims, true)};

    VolumePatchSource a(vols, masks, 8, 0.5, 7);
    VolumePatchSource b(vols, masks, 8, 0.5, 7);
    VolumePatchSource c(vols, masks, 8, 0.5, 8);

    bool all_same = true, any_diff_seed = false;
    for (int i = 0; i < 10; ++i) {
        auto pa = a.next();
        auto pb = b.next();
        auto pc = c.next();
        REQUIRE(pa.c == 1);
        REQUIRE(pa.d == 8);
        REQUIRE(pa.h == 8);
        REQUIRE(pa.w == 8);
        if (pa.v != pb.v) all_same = false;
        if (pa.v != pc.v) any_diff_seed = true;
        for (double v : pa.v) CHECK(std::abs(v) <= 0.5);
    }
    CHECK(all_same);
    CHECK(any_diff_seed);
}

TEST_CASE("volume patch source validates its inputs") {
    const Dims dims{8, 8, 8};
    auto vol = normalized_volume(dims, 103);
    std::vector<Mask> masks{make_mask(dims, true)};

    SUBCASE("HU volumes are rejected") {
        vol.value_space = ValueSpace::HU;
        std::vector<Volume> vols{vol};
        CHECK_THROWS_AS(VolumePatchSource(vols, masks, 8, 0.5, 1),
                        ArgumentError);
    }
    SUBCASE("patch larger than the volume") {
        std::vector<Volume> vols{vol};
        CHECK_THROWS_AS(VolumePatchSource(vols, masks, 16, 0.5, 1),
                        ShapeError);
    }
    SUBCASE("count mismatch") {
        std::vector<Volume> vols{vol};
        std::vector<Mask> two{make_mask(dims, true), make_mask(dims, true)};
        CHECK_THROWS_AS(VolumePatchSource(vols, two, 8, 0.5, 1),
                        ArgumentError);
    }
}

TEST_CASE("training is deterministic and logs the documented rows") {
    TempDir tmp;
    const Dims dims{16, 16, 16};
    std::vector<Volume> vols{normalized_volume(dims, 111),
                             normalized_volume(dims, 112)};
    std::vector<Mask> masks{make_mask(dims, true), make_mask(dims, true)};

    FlowConfig fcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.iterations = 5;
    tcfg.batch_size = 3;
    tcfg.lr = 1e-3;
    tcfg.seed = 13;
    tcfg.log_every = 2;
    tcfg.checkpoint_every = 100;

    auto run = [&](const std::string& tag) {
        VolumePatchSource src(vols, masks, fcfg.patch_edge, 0.5,
                              Rng::derive(tcfg.seed, 1));
        const auto ckpt = (tmp.path / (tag + ".rflw")).string();
        const auto csv = (tmp.path / (tag + ".csv")).string();
        auto st = train(src, fcfg, tcfg, ckpt, csv);
        return std::make_pair(ckpt, std::move(st));
    };

    auto [ckpt1, st1] = run("a");
    auto [ckpt2, st2] = run("b");

    CHECK(st1.step == 5);
    CHECK(st1.bpd_history.size() == 5);
    CHECK(st1.bpd_history == st2.bpd_history);
    CHECK(read_bytes(ckpt1) == read_bytes(ckpt2));

    // Rows at step 1, every log_every, and the last step: 1, 2, 4, 5.
    std::ifstream csv(tmp.path / "a.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(csv, line))
        if (!line.empty()) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "step,bits_per_dim,grad_norm,wallclock_s");
    CHECK(lines[1].rfind("1,", 0) == 0);
    CHECK(lines[2].rfind("2,", 0) == 0);
    CHECK(lines[3].rfind("4,", 0) == 0);
    CHECK(lines[4].rfind("5,", 0) == 0);
}

TEST_CASE("zero-iteration training still writes an initialized checkpoint") {
    TempDir tmp;
    const Dims dims{16, 16, 16};
    std::vector<Volume> vols{normalized_volume(dims, 113)};
    std::vector<Mask> masks{make_mask(dims, true)};
    VolumePatchSource src(vols, masks, 8, 0.5, 3);

    TrainConfig tcfg;
    tcfg.iterations = 0;
    tcfg.batch_size = 4;
    const auto ckpt = (tmp.path / "init.rflw").string();
    auto st = train(src, tiny_config(), tcfg, ckpt, "");
    CHECK(st.step == 0);
    auto loaded = load_checkpoint<double>(ckpt);
    CHECK(loaded.actnorm_initialized());
}

TEST_CASE("a divergent run raises a numeric error naming the step") {
    TempDir tmp;
    const Dims dims{16, 16, 16};
    std::vector<Volume> vols{normalized_volume(dims, 114)};
    std::vector<Mask> masks{make_mask(dims, true)};
    VolumePatchSource src(vols, masks, 8, 0.5, 3);

    TrainConfig tcfg;
    tcfg.iterations = 10;
    tcfg.batch_size = 2;
    tcfg.lr = 1e15;
    tcfg.grad_clip_norm = 1e30;
    const auto ckpt = (tmp.path / "boom.rflw").string();
    try {
        (void)train(src, tiny_config(), tcfg, ckpt, "");
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("at step") != std::string::npos);
    }
    // The last good checkpoint survives.
    CHECK(std::filesystem::exists(ckpt));
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(validate(c));
    SUBCASE("batch") { c.batch_size = 0; }
    SUBCASE("lr") { c.lr = 0.0; }
    SUBCASE("wd") { c.weight_decay = -1.0; }
    SUBCASE("beta1") { c.adam_beta1 = 1.0; }
    SUBCASE("beta2") { c.adam_beta2 = 0.0; }
    SUBCASE("eps") { c.adam_eps = 0.0; }
    SUBCASE("bin") { c.dequant_bin = -0.1; }
    SUBCASE("clip") { c.grad_clip_norm = 0.0; }
    SUBCASE("log_every") { c.log_every = 0; }
    SUBCASE("checkpoint_every") { c.checkpoint_every = 0; }
    SUBCASE("threads") { c.threads = 0; }
    CHECK_THROWS_AS(validate(c), ArgumentError);
}
