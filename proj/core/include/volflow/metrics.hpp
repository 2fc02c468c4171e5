#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace volflow {

enum class SubjectLabel : int { Normal = 0, Abnormal = 1 };

struct LabeledScore {
    std::string id;
    double score = 0;
    SubjectLabel label = SubjectLabel::Normal;
};

struct RocPoint {
    double fpr = 0, tpr = 0;
    double threshold = 0;
};

struct Metrics {
    double auroc = 0;
    double f1 = 0;
    double accuracy = 0;
    std::vector<RocPoint> roc_points;
    double chosen_T = 0;
};

/// Mann-Whitney AUROC via average ranks: (wins + 0.5*ties) / (P*N).
/// Needs at least one sample of each class. Trapezoidal integration of
/// roc_curve() gives the same value.
double auroc(const std::vector<LabeledScore>& scores);

/// ROC operating points, one per distinct score (prediction: score >
/// threshold), with exact endpoints (0,0) and (1,1). fpr and tpr are
/// non-decreasing along the curve.
std::vector<RocPoint> roc_curve(const std::vector<LabeledScore>& scores);

double trapezoid_auc(const std::vector<RocPoint>& roc);

/// F1 and accuracy with positives predicted by score > threshold. F1 is
/// 0 when precision + recall is 0.
std::pair<double, double> f1_accuracy(const std::vector<LabeledScore>& scores,
                                      double threshold);

/// Sweep T over {t_lo, t_lo+step, ..., t_hi} and pick the maximizer of
/// Youden's J = tpr - fpr, ties broken toward the smallest T.
double select_threshold(const std::vector<LabeledScore>& validation,
                        double t_lo = 0.5, double t_hi = 20.0,
                        double step = 0.5);

Metrics evaluate(const std::vector<LabeledScore>& test, double chosen_T);

// CSV rows are "id,score,label" with label 0 = Normal, 1 = Abnormal.
std::vector<LabeledScore> read_scores_csv(const std::string& path);
void write_scores_csv(const std::string& path,
                      const std::vector<LabeledScore>& scores);
void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc);
std::string metrics_json(const Metrics& m);

}  // namespace volflow
