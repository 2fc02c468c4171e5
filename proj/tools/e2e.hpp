#pragma once

#include <cstdint>
#include <string>

namespace volflow {

/// Synthetic end-to-end experiment: generate data, preprocess, train,
/// calibrate, score, select the decision threshold on validation, and
/// evaluate on test. Everything is derived from `seed`.
struct E2EConfig {
    std::string out_dir;
    std::uint64_t seed = 1;

    std::uint32_t train_n = 40;
    std::uint32_t val_n = 20;  ///< second half lesioned
    std::uint32_t test_n = 20;

    std::uint32_t dim = 64;
    double spacing_mm = 2.0;
    double lesion_radius_lo_mm = 8.0;
    double lesion_radius_hi_mm = 12.0;

    std::uint32_t levels = 2;
    std::uint32_t flows = 4;
    std::uint32_t patch_edge = 16;
    std::uint32_t hidden = 32;

    std::uint32_t iterations = 2000;
    std::uint32_t batch_size = 10;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double min_mask_fraction = 0.5;

    std::uint32_t overlap = 10;
    double smoothing_sigma_vox = 2.0;
    double binarize_quantile = 0.02;
    double min_component_cm3 = 0.1;

    std::uint32_t threads = 1;
    bool write_maps = false;
    bool write_volumes = false;
};

struct E2EReport {
    double initial_bpd = 0;
    double final_bpd = 0;  ///< mean over the last tenth of the loss history
    double auroc = 0;
    double f1 = 0;
    double accuracy = 0;
    double chosen_T = 0;
    double mean_nats_lesion_patches = 0;  ///< test patches overlapping a lesion
    double mean_nats_normal_patches = 0;  ///< lung patches without lesion
    std::size_t n_calibration = 0;
    double wallclock_s = 0;
};

E2EReport run_e2e(const E2EConfig& cfg);

}  // namespace volflow
