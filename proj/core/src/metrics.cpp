#include "volflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "volflow/errors.hpp"

namespace volflow {

namespace {

void require_both_classes(const std::vector<LabeledScore>& scores,
                          const char* what) {
    std::size_t pos = 0, neg = 0;
    for (const auto& s : scores) {
        if (!std::isfinite(s.score))
            throw ArgumentError("non-finite score for subject " + s.id);
        (s.label == SubjectLabel::Abnormal ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0) throw MetricError(what);
}

}  // namespace

double auroc(const std::vector<LabeledScore>& scores) {
    require_both_classes(scores, "auroc needs both classes");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a].score < scores[b].score;
    });

    double rank_pos = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]].score == scores[idx[i]].score) ++j;
        const double avg_rank = double(i + 1 + j) / 2.0;  // 1-based ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (scores[idx[k]].label == SubjectLabel::Abnormal) {
                rank_pos += avg_rank;
                ++pos;
            }
        }
        i = j;
    }
    const double P = double(pos), N = double(n - pos);
    return (rank_pos - P * (P + 1) / 2.0) / (P * N);
}

std::vector<RocPoint> roc_curve(const std::vector<LabeledScore>& scores) {
    require_both_classes(scores, "roc curve needs both classes");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a].score > scores[b].score;
    });
    std::size_t P = 0, N = 0;
    for (const auto& s : scores)
        (s.label == SubjectLabel::Abnormal ? P : N) += 1;

    std::vector<RocPoint> roc;
    roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double v = scores[idx[i]].score;
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]].score == v) {
            if (scores[idx[j]].label == SubjectLabel::Abnormal)
                ++tp;
            else
                ++fp;
            ++j;
        }
        // Operating point once every score >= v is predicted positive;
        // reached by any strict threshold just below v.
        roc.push_back({double(fp) / double(N), double(tp) / double(P), v});
        i = j;
    }
    return roc;
}

double trapezoid_auc(const std::vector<RocPoint>& roc) {
    if (roc.size() < 2) throw MetricError("roc curve needs >= 2 points");
    double area = 0;
    for (std::size_t i = 1; i < roc.size(); ++i)
        area += (roc[i].fpr - roc[i - 1].fpr) *
                (roc[i].tpr + roc[i - 1].tpr) / 2.0;
    return area;
}

std::pair<double, double> f1_accuracy(const std::vector<LabeledScore>& scores,
                                      double threshold) {
    if (scores.empty()) throw ArgumentError("no scores");
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (const auto& s : scores) {
        const bool pred = s.score > threshold;
        const bool truth = s.label == SubjectLabel::Abnormal;
        if (pred && truth)
            ++tp;
        else if (pred && !truth)
            ++fp;
        else if (!pred && truth)
            ++fn;
        else
            ++tn;
    }
    const double precision = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
    const double f1 = precision + recall == 0
                          ? 0.0
                          : 2.0 * precision * recall / (precision + recall);
    const double acc = double(tp + tn) / double(scores.size());
    return {f1, acc};
}

double select_threshold(const std::vector<LabeledScore>& validation,
                        double t_lo, double t_hi, double step) {
    if (!(step > 0) || !(t_hi >= t_lo))
        throw ArgumentError("bad threshold sweep bounds");
    std::size_t P = 0, N = 0;
    for (const auto& s : validation)
        (s.label == SubjectLabel::Abnormal ? P : N) += 1;
    if (P == 0 || N == 0)
        throw SelectionError("threshold selection needs both classes");

    const auto steps = std::size_t(std::llround((t_hi - t_lo) / step));
    double best_j = -2.0, best_t = t_lo;
    for (std::size_t k = 0; k <= steps; ++k) {
        const double t = t_lo + double(k) * step;
        std::size_t tp = 0, fp = 0;
        for (const auto& s : validation) {
            if (s.score > t) {
                if (s.label == SubjectLabel::Abnormal)
                    ++tp;
                else
                    ++fp;
            }
        }
        const double j = double(tp) / double(P) - double(fp) / double(N);
        if (j > best_j) {
            best_j = j;
            best_t = t;
        }
    }
    return best_t;
}

Metrics evaluate(const std::vector<LabeledScore>& test, double chosen_T) {
    Metrics m;
    m.auroc = auroc(test);
    m.roc_points = roc_curve(test);
    const auto fa = f1_accuracy(test, chosen_T);
    m.f1 = fa.first;
    m.accuracy = fa.second;
    m.chosen_T = chosen_T;
    return m;
}

std::vector<LabeledScore> read_scores_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<LabeledScore> out;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("id,", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        std::stringstream ss(line);
        std::string id, score_s, label_s;
        if (!std::getline(ss, id, ',') || !std::getline(ss, score_s, ',') ||
            !std::getline(ss, label_s))
            throw FormatError("bad score row: " + line);
        LabeledScore s;
        s.id = id;
        try {
            s.score = std::stod(score_s);
            const int lab = std::stoi(label_s);
            if (lab != 0 && lab != 1) throw FormatError("label must be 0 or 1");
            s.label = lab ? SubjectLabel::Abnormal : SubjectLabel::Normal;
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception&) {
            throw FormatError("bad score row: " + line);
        }
        out.push_back(std::move(s));
    }
    return out;
}

void write_scores_csv(const std::string& path,
                      const std::vector<LabeledScore>& scores) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << std::setprecision(17) << "id,score,label\n";
    for (const auto& s : scores)
        f << s.id << ',' << s.score << ','
          << (s.label == SubjectLabel::Abnormal ? 1 : 0) << '\n';
    if (!f) throw IoError("write failed: " + path);
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << std::setprecision(17) << "fpr,tpr,threshold\n";
    for (const auto& p : roc)
        f << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
    if (!f) throw IoError("write failed: " + path);
}

std::string metrics_json(const Metrics& m) {
    nlohmann::ordered_json j;
    j["auroc"] = m.auroc;
    j["f1"] = m.f1;
    j["accuracy"] = m.accuracy;
    j["chosen_T"] = m.chosen_T;
    return j.dump(2);
}

}  // namespace volflow
