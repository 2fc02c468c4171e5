#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "volflow/metrics.hpp"
#include "volflow/rng.hpp"

using namespace volflow;

namespace {

std::vector<LabeledScore> make_scores(const std::vector<double>& vals,
                                      const std::vector<int>& labels) {
    std::vector<LabeledScore> out;
    for (std::size_t i = 0; i < vals.size(); ++i)
        out.push_back({"s" + std::to_string(i), vals[i],
                       labels[i] ? SubjectLabel::Abnormal
                                 : SubjectLabel::Normal});
    return out;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("volflow_metrics_test_" + std::to_string(std::rand()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("auroc worked example is exactly 0.75") {
    auto s = make_scores({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
    CHECK(auroc(s) == 0.75);
    CHECK(trapezoid_auc(roc_curve(s)) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("auroc of separable and degenerate score sets") {
    SUBCASE("perfect separation") {
        auto s = make_scores({1, 2, 3, 11, 12}, {0, 0, 0, 1, 1});
        CHECK(auroc(s) == 1.0);
    }
    SUBCASE("inverted separation") {
        auto s = make_scores({11, 12, 1, 2}, {0, 0, 1, 1});
        CHECK(auroc(s) == 0.0);
    }
    SUBCASE("all scores tied") {
        auto s = make_scores({5, 5, 5, 5}, {0, 1, 0, 1});
        CHECK(auroc(s) == 0.5);
    }
}

TEST_CASE("rank and trapezoid and pairwise AUROC agree on random sets") {
    Rng rng(301);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + int(rng.uniform_index(199));
        std::vector<double> vals;
        std::vector<int> labels;
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            // Quantized scores so ties actually occur.
            vals.push_back(std::floor(rng.uniform(0.0, 20.0)) / 2.0);
            labels.push_back(int(rng.uniform_index(2)));
            (labels.back() ? has1 : has0) = true;
        }
        if (!has0) labels[0] = 0;
        if (!has1) labels[n > 1 ? 1 : 0] = 1;
        if (!has0 && n == 1) continue;

        auto s = make_scores(vals, labels);
        const double rank_auc = auroc(s);
        const double trap = trapezoid_auc(roc_curve(s));
        const double pair = oracles::pairwise_auc(s);
        CHECK(std::abs(rank_auc - pair) < 1e-12);
        CHECK(std::abs(trap - pair) < 1e-12);
    }
}

TEST_CASE("auroc is invariant under monotone transforms") {
    Rng rng(302);
    std::vector<double> vals;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
        vals.push_back(rng.uniform(0.1, 9.0));
        labels.push_back(int(rng.uniform_index(2)));
    }
    labels[0] = 0;
    labels[1] = 1;
    auto s = make_scores(vals, labels);
    const double base = auroc(s);

    auto t = s;
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i].score = std::exp(t[i].score) + 3.0;
    CHECK(auroc(t) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("roc curve has exact endpoints and monotone points") {
    Rng rng(303);
    std::vector<double> vals;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        vals.push_back(std::floor(rng.uniform(0.0, 10.0)));
        labels.push_back(int(rng.uniform_index(2)));
    }
    labels[0] = 0;
    labels[1] = 1;
    auto roc = roc_curve(make_scores(vals, labels));
    REQUIRE(roc.size() >= 2);
    CHECK(roc.front().fpr == 0.0);
    CHECK(roc.front().tpr == 0.0);
    CHECK(roc.back().fpr == 1.0);
    CHECK(roc.back().tpr == 1.0);
    for (std::size_t i = 1; i < roc.size(); ++i) {
        CHECK(roc[i].fpr >= roc[i - 1].fpr);
        CHECK(roc[i].tpr >= roc[i - 1].tpr);
    }
}

TEST_CASE("f1 and accuracy on a worked confusion matrix") {
    // threshold 2.0, predictions score > 2: TP 3, FP 1, FN 1, TN 5.
    std::vector<double> vals{3, 4, 5, 1, 3, 1, 1, 2, 2, 2};
    std::vector<int> labels{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    auto [f1, acc] = f1_accuracy(make_scores(vals, labels), 2.0);
    CHECK(f1 == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(acc == doctest::Approx(0.8).epsilon(1e-15));

    SUBCASE("empty prediction set gives zero f1") {
        auto [f0, a0] = f1_accuracy(make_scores({1, 1}, {1, 0}), 5.0);
        CHECK(f0 == 0.0);
        CHECK(a0 == 0.5);
    }
}

TEST_CASE("threshold selection maximizes Youden J with smallest-tie rule") {
    SUBCASE("separable classes pick the first separating step") {
        // Normals at 3, abnormals at 7: every T in [3, 6.5] separates, the
        // sweep grid hits 3.0 first.
        auto s = make_scores({3, 3, 3, 7, 7, 7}, {0, 0, 0, 1, 1, 1});
        CHECK(select_threshold(s) == 3.0);
    }
    SUBCASE("identical scores fall back to the sweep start") {
        auto s = make_scores({4, 4, 4, 4}, {0, 0, 1, 1});
        CHECK(select_threshold(s) == 0.5);
    }
    SUBCASE("scores beyond the sweep ceiling saturate") {
        auto s = make_scores({103, 103, 107, 107}, {0, 0, 1, 1});
        CHECK(select_threshold(s) == 0.5);
    }
    SUBCASE("single-class validation is rejected") {
        auto s = make_scores({1, 2}, {0, 0});
        CHECK_THROWS_AS((void)select_threshold(s), SelectionError);
    }
    SUBCASE("bad sweep bounds are rejected") {
        auto s = make_scores({1, 2}, {0, 1});
        CHECK_THROWS_AS((void)select_threshold(s, 5.0, 1.0, 0.5), ArgumentError);
        CHECK_THROWS_AS((void)select_threshold(s, 1.0, 5.0, 0.0), ArgumentError);
    }
}

TEST_CASE("evaluate bundles auroc, roc, f1 and accuracy at the chosen T") {
    std::vector<double> vals{3, 4, 5, 1, 3, 1, 1, 2, 2, 2};
    std::vector<int> labels{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    auto m = evaluate(make_scores(vals, labels), 2.0);
    CHECK(m.chosen_T == 2.0);
    CHECK(m.f1 == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.accuracy == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.auroc ==
          doctest::Approx(oracles::pairwise_auc(make_scores(vals, labels)))
              .epsilon(1e-12));
    CHECK(m.roc_points.size() >= 2);
    CHECK(trapezoid_auc(m.roc_points) == doctest::Approx(m.auroc).epsilon(1e-12));
}

TEST_CASE("metric errors on degenerate inputs") {
    SUBCASE("single class auroc") {
        auto s = make_scores({1, 2}, {1, 1});
        CHECK_THROWS_AS((void)auroc(s), MetricError);
    }
    SUBCASE("empty") {
        CHECK_THROWS_AS((void)auroc({}), MetricError);
    }
    SUBCASE("non-finite score") {
        auto s = make_scores({1, 2}, {0, 1});
        s[0].score = std::nan("");
        CHECK_THROWS_AS((void)auroc(s), ArgumentError);
    }
}

TEST_CASE("scores CSV round-trips") {
    TempDir tmp;
    const auto path = (tmp.path / "scores.csv").string();
    auto s = make_scores({3.25, 0.0078125, 12.5}, {1, 0, 1});
    s[0].id = "case one";
    write_scores_csv(path, s);
    auto back = read_scores_csv(path);
    REQUIRE(back.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(back[i].id == s[i].id);
        CHECK(back[i].score == s[i].score);
        CHECK(back[i].label == s[i].label);
    }
}

TEST_CASE("scores CSV rejects malformed rows") {
    TempDir tmp;
    const auto path = (tmp.path / "bad.csv").string();
    SUBCASE("missing column") {
        std::ofstream(path) << "id,score,label\np01,3.5\n";
        CHECK_THROWS_AS((void)read_scores_csv(path), FormatError);
    }
    SUBCASE("non-numeric score") {
        std::ofstream(path) << "id,score,label\np01,abc,1\n";
        CHECK_THROWS_AS((void)read_scores_csv(path), FormatError);
    }
    SUBCASE("label out of range") {
        std::ofstream(path) << "id,score,label\np01,3.5,2\n";
        CHECK_THROWS_AS((void)read_scores_csv(path), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS((void)read_scores_csv((tmp.path / "no.csv").string()),
                        IoError);
    }
}

TEST_CASE("roc CSV and metrics JSON are well formed") {
    TempDir tmp;
    auto s = make_scores({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
    auto m = evaluate(s, 0.5);

    const auto roc_path = (tmp.path / "roc.csv").string();
    write_roc_csv(roc_path, m.roc_points);
    std::ifstream f(roc_path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "fpr,tpr,threshold");
    std::size_t rows = 0;
    for (std::string line; std::getline(f, line);)
        if (!line.empty()) ++rows;
    CHECK(rows == m.roc_points.size());

    const auto j = nlohmann::json::parse(metrics_json(m));
    CHECK(j.at("auroc").get<double>() == m.auroc);
    CHECK(j.at("f1").get<double>() == m.f1);
    CHECK(j.at("accuracy").get<double>() == m.accuracy);
    CHECK(j.at("chosen_T").get<double>() == m.chosen_T);
}

TEST_CASE("selected threshold is consistent with J on the sweep grid") {
    Rng rng(311);
    std::vector<double> vals;
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) {
        labels.push_back(int(rng.uniform_index(2)));
        vals.push_back(labels.back() ? rng.uniform(2.0, 18.0)
                                     : rng.uniform(0.0, 9.0));
    }
    labels[0] = 0;
    labels[1] = 1;
    auto s = make_scores(vals, labels);
    const double chosen = select_threshold(s);

    auto youden = [&](double t) {
        double tp = 0, fp = 0, p = 0, n = 0;
        for (const auto& e : s) {
            const bool pred = e.score > t;
            if (e.label == SubjectLabel::Abnormal) {
                p += 1;
                tp += pred;
            } else {
                n += 1;
                fp += pred;
            }
        }
        return tp / p - fp / n;
    };

    const double best = youden(chosen);
    for (double t = 0.5; t <= 20.0 + 1e-9; t += 0.5) {
        CHECK(youden(t) <= best + 1e-12);
        if (std::abs(youden(t) - best) < 1e-12) {
            CHECK(chosen <= t + 1e-12);  // smallest tie wins
            break;
        }
    }
}
