#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#ifndef VOLFLOW_BIN
#error "VOLFLOW_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd =
        std::string(VOLFLOW_BIN) + " " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("volflow_cli_test_" + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cli: bad invocations fail with a nonzero exit") {
    CHECK(run("") != 0);
    CHECK(run("no-such-command") != 0);
    CHECK(run("gen-synth") != 0);           // missing --out
    CHECK(run("score --volume x.rvol") != 0);
}

TEST_CASE("cli: gen-synth writes a deterministic labeled corpus") {
    TempDir tmp;
    const auto a = tmp.path / "a";
    const auto b = tmp.path / "b";
    REQUIRE(run("gen-synth --out " + a.string() +
                " --count 4 --lesioned-fraction 0.5 --dim 48 --seed 5") == 0);
    REQUIRE(run("gen-synth --out " + b.string() +
                " --count 4 --lesioned-fraction 0.5 --dim 48 --seed 5") == 0);

    for (const char* id : {"synth_000", "synth_001", "synth_002", "synth_003"}) {
        CHECK(fs::exists(a / (std::string(id) + ".vol.rvol")));
        CHECK(fs::exists(a / (std::string(id) + ".mask.rvol")));
    }
    // Same seed, same bytes.
    CHECK(read_bytes(a / "synth_000.vol.rvol") ==
          read_bytes(b / "synth_000.vol.rvol"));
    CHECK(read_bytes(a / "synth_003.vol.rvol") ==
          read_bytes(b / "synth_003.vol.rvol"));

    // Half the subjects (the trailing ones) carry lesions.
    const auto labels = read_text(a / "labels.csv");
    CHECK(labels.find("synth_000,0") != std::string::npos);
    CHECK(labels.find("synth_001,0") != std::string::npos);
    CHECK(labels.find("synth_002,1") != std::string::npos);
    CHECK(labels.find("synth_003,1") != std::string::npos);

    // Lesioned subjects also get a lesion mask artifact.
    CHECK(!fs::exists(a / "synth_000.lesions.rvol"));
    CHECK(fs::exists(a / "synth_003.lesions.rvol"));
}

TEST_CASE("cli: full pipeline from generation to evaluation") {
    TempDir tmp;
    const auto raw = tmp.path / "raw";
    const auto prep = tmp.path / "prep";
    fs::create_directories(prep);

    REQUIRE(run("gen-synth --out " + raw.string() +
                " --count 3 --dim 48 --seed 11") == 0);
    for (const char* id : {"synth_000", "synth_001", "synth_002"}) {
        const std::string in = (raw / (std::string(id) + ".vol.rvol")).string();
        const std::string mask = (raw / (std::string(id) + ".mask.rvol")).string();
        const std::string out = (prep / (std::string(id) + ".vol.rvol")).string();
        const std::string mout = (prep / (std::string(id) + ".mask.rvol")).string();
        REQUIRE(run("preprocess --in " + in + " --out " + out + " --mask-in " +
                    mask + " --mask-out " + mout + " --spacing 2") == 0);
    }

    // Train a deliberately tiny model for a couple of steps.
    const auto cfg = tmp.path / "train.cfg";
    std::ofstream(cfg) << "levels = 2\nflows = 2\npatch_edge = 16\n"
                          "hidden = 8\niterations = 2\nbatch_size = 4\n"
                          "seed = 3\nlog_every = 1\n";
    const auto model = tmp.path / "model.rflw";
    const auto log = tmp.path / "train.csv";
    REQUIRE(run("train --data " + prep.string() + " --out " + model.string() +
                " --config " + cfg.string() + " --log " + log.string()) == 0);
    REQUIRE(fs::exists(model));
    CHECK(read_text(log).rfind("step,bits_per_dim,grad_norm,wallclock_s", 0) == 0);

    const auto cal = tmp.path / "calibration.txt";
    REQUIRE(run("calibrate --data " + prep.string() + " --model " +
                model.string() + " --out " + cal.string() +
                " --overlap 10 --min-mask-fraction 0.3") == 0);
    std::size_t cal_lines = 0;
    {
        std::ifstream f(cal);
        for (std::string line; std::getline(f, line);)
            if (!line.empty()) ++cal_lines;
    }
    CHECK(cal_lines >= 100);

    const auto out_json = tmp.path / "result.json";
    const auto out_map = tmp.path / "result.map.rvol";
    REQUIRE(run("score --volume " + (prep / "synth_000.vol.rvol").string() +
                " --mask " + (prep / "synth_000.mask.rvol").string() +
                " --model " + model.string() + " --calibration " +
                cal.string() + " --out-json " + out_json.string() +
                " --out-map " + out_map.string() +
                " --overlap 10 --with-patch-scores") == 0);
    REQUIRE(fs::exists(out_json));
    REQUIRE(fs::exists(out_map));
    const auto r = nlohmann::json::parse(read_text(out_json));
    CHECK(r.contains("anomaly_volume_cm3"));
    CHECK((r.at("label") == "Normal" || r.at("label") == "Abnormal"));
    CHECK(r.at("per_patch_scores").size() > 0);

    // Evaluation from a scores CSV, both with a fixed T and a val CSV.
    const auto test_csv = tmp.path / "test_scores.csv";
    std::ofstream(test_csv) << "id,score,label\n"
                               "p0,0.1,0\np1,0.2,0\np2,6.0,1\np3,9.0,1\n";
    const auto val_csv = tmp.path / "val_scores.csv";
    std::ofstream(val_csv) << "id,score,label\n"
                              "v0,0.3,0\nv1,0.1,0\nv2,7.0,1\nv3,8.0,1\n";

    const auto m1 = tmp.path / "metrics_fixed.json";
    REQUIRE(run("evaluate --scores " + test_csv.string() +
                " --threshold-from 2.0 --out " + m1.string()) == 0);
    const auto j1 = nlohmann::json::parse(read_text(m1));
    CHECK(j1.at("auroc").get<double>() == 1.0);
    CHECK(j1.at("chosen_T").get<double>() == 2.0);

    const auto m2 = tmp.path / "metrics_val.json";
    const auto roc = tmp.path / "roc.csv";
    REQUIRE(run("evaluate --scores " + test_csv.string() + " --threshold-from " +
                val_csv.string() + " --out " + m2.string() + " --roc-csv " +
                roc.string()) == 0);
    const auto j2 = nlohmann::json::parse(read_text(m2));
    CHECK(j2.at("f1").get<double>() == 1.0);
    CHECK(fs::exists(roc));
}
