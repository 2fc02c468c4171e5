#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volflow/flow/model.hpp"
#include "volflow/patching.hpp"
#include "volflow/volume.hpp"

namespace volflow {

/// Per-voxel aggregated per-dimension log-likelihood (nats/dim) plus how
/// many patches contributed to each voxel.
struct LogPMap {
    Dims dims;
    std::vector<double> values;
    std::vector<std::uint32_t> coverage_count;
};

struct PipelineConfig {
    GridSpec grid;
    double smoothing_sigma_vox = 2.0;
    double binarize_quantile = 0.02;
    double min_component_cm3 = 0.1;
    double decision_threshold_T_cm3 = 0.5;  ///< normally set from validation
    std::vector<double> calibration;        ///< sorted per-dim nats
};

void validate(const PipelineConfig& c);

enum class PatientLabel : std::uint8_t { Normal = 0, Abnormal = 1 };

struct PatchScore {
    Origin origin;
    double per_dim_nats = 0;
};

struct PatientResult {
    double anomaly_volume_cm3 = 0;
    PatientLabel label = PatientLabel::Normal;
    std::string logp_map_path;  ///< empty when no map artifact was written
    std::vector<PatchScore> patch_scores;
};

/// Score every inference-grid patch of a normalized volume. Output order
/// is the grid's lexicographic origin order and is independent of
/// `threads`. Throws NumericError on a non-finite score.
std::vector<PatchScore> score_volume(const Volume& v, const Mask& mask,
                                     const FlowModel<double>& model,
                                     const GridSpec& grid,
                                     std::uint32_t threads = 1);

/// Raw per-voxel value = mean of the scores of all covering patches;
/// then separable Gaussian smoothing (radius ceil(3*sigma), kernel
/// renormalized at borders). sigma = 0 skips smoothing.
LogPMap aggregate_map(const std::vector<PatchScore>& scores, Dims dims,
                      const GridSpec& grid, double sigma);

/// Linear-interpolation quantile of an ascending-sorted sample, at
/// position q*(n-1).
double quantile_sorted(const std::vector<double>& sorted, double q);

/// Anomaly candidate voxels: map value below the q-quantile of the
/// calibration distribution, intersected with the (lung) mask.
Mask binarize(const LogPMap& map, const Mask& mask,
              const std::vector<double>& calibration, double q);

/// Drop 26-connected components with physical volume < min_cm3.
Mask filter_components(const Mask& bin, Spacing spacing, double min_cm3);

/// Total flagged volume and the Normal/Abnormal call (Abnormal iff
/// volume > T). T must lie in [0.5, 20] cm^3.
PatientResult classify(const Mask& bin, Spacing spacing, double t_cm3);

/// Sorted copy of validation-normal patch scores; needs >= 100 values.
std::vector<double> calibrate(std::vector<double> scores);

std::string patient_result_json(const PatientResult& r, double threshold_T,
                                bool include_patch_scores);

/// The map as an RVOL volume (value space Map) for writing to disk.
Volume logp_map_volume(const LogPMap& map, Spacing spacing);

}  // namespace volflow
