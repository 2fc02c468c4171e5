#include "volflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include <json.hpp>

#include "volflow/components.hpp"
#include "volflow/errors.hpp"
#include "volflow/smoothing.hpp"

namespace volflow {

void validate(const PipelineConfig& c) {
    validate(c.grid);
    if (!(c.smoothing_sigma_vox >= 0))
        throw ArgumentError("smoothing_sigma_vox must be >= 0");
    if (!(c.binarize_quantile > 0 && c.binarize_quantile < 1))
        throw ArgumentError("binarize_quantile must be in (0,1)");
    if (!(c.min_component_cm3 >= 0))
        throw ArgumentError("min_component_cm3 must be >= 0");
    if (!(c.decision_threshold_T_cm3 >= 0.5 &&
          c.decision_threshold_T_cm3 <= 20.0))
        throw ArgumentError("decision threshold must be in [0.5, 20]");
    if (!std::is_sorted(c.calibration.begin(), c.calibration.end()))
        throw CalibrationError("calibration distribution must be sorted");
}

std::vector<PatchScore> score_volume(const Volume& v, const Mask& mask,
                                     const FlowModel<double>& model,
                                     const GridSpec& grid,
                                     std::uint32_t threads) {
    if (v.value_space != ValueSpace::Normalized)
        throw ArgumentError("score_volume needs a normalized volume");
    if (!(mask.dims == v.dims))
        throw ShapeError("mask dims do not match the volume");
    if (model.config.patch_edge != grid.patch_edge)
        throw ArgumentError("model patch edge does not match the grid");
    if (model.config.in_channels != 1)
        throw ArgumentError("volume scoring needs a single-channel model");
    if (threads == 0) throw ArgumentError("threads must be > 0");

    const auto origins = inference_grid(v.dims, grid);
    std::vector<PatchScore> scores(origins.size());
    const std::uint32_t E = grid.patch_edge;

    auto run = [&](std::size_t i) {
        const Patch p = extract_patch(v, origins[i], E);
        Tensor4<double> t(1, E, E, E);
        for (std::size_t j = 0; j < p.data.size(); ++j)
            t.v[j] = double(p.data[j]);
        const LogDensity d = model.log_prob(t);
        if (!std::isfinite(d.per_dim_nats))
            throw NumericError("non-finite patch score");
        scores[i] = {origins[i], d.per_dim_nats};
    };

    const std::size_t W = std::min<std::size_t>(threads, origins.size());
    if (W <= 1) {
        for (std::size_t i = 0; i < origins.size(); ++i) run(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errs(W);
        for (std::size_t w = 0; w < W; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < origins.size(); i += W) run(i);
                } catch (...) {
                    errs[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (const auto& e : errs)
            if (e) std::rethrow_exception(e);
    }
    return scores;
}

LogPMap aggregate_map(const std::vector<PatchScore>& scores, Dims dims,
                      const GridSpec& grid, double sigma) {
    if (scores.empty()) throw ArgumentError("empty score list");
    if (!(sigma >= 0)) throw ArgumentError("sigma must be >= 0");
    LogPMap map;
    map.dims = dims;
    map.values.assign(dims.count(), 0.0);
    map.coverage_count.assign(dims.count(), 0);
    const std::uint32_t E = grid.patch_edge;
    for (const auto& s : scores) {
        if (s.origin.z + E > dims.d || s.origin.y + E > dims.h ||
            s.origin.x + E > dims.w)
            throw ShapeError("patch extends past the volume");
        for (std::uint32_t z = s.origin.z; z < s.origin.z + E; ++z)
            for (std::uint32_t y = s.origin.y; y < s.origin.y + E; ++y) {
                const std::size_t row =
                    (std::size_t(z) * dims.h + y) * dims.w + s.origin.x;
                for (std::uint32_t x = 0; x < E; ++x) {
                    map.values[row + x] += s.per_dim_nats;
                    ++map.coverage_count[row + x];
                }
            }
    }
    for (std::size_t i = 0; i < map.values.size(); ++i)
        if (map.coverage_count[i] > 0)
            map.values[i] /= double(map.coverage_count[i]);
    if (sigma > 0)
        gaussian_smooth_separable(map.values, dims.d, dims.h, dims.w, sigma);
    return map;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw ArgumentError("quantile of an empty sample");
    if (!(q >= 0 && q <= 1)) throw ArgumentError("quantile q must be in [0,1]");
    const double pos = q * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

Mask binarize(const LogPMap& map, const Mask& mask,
              const std::vector<double>& calibration, double q) {
    if (calibration.empty())
        throw CalibrationError("empty calibration distribution");
    if (!std::is_sorted(calibration.begin(), calibration.end()))
        throw CalibrationError("calibration distribution must be sorted");
    if (!(q > 0 && q < 1))
        throw ArgumentError("binarize quantile must be in (0,1)");
    if (!(mask.dims == map.dims))
        throw ShapeError("mask dims do not match the map");
    const double theta = quantile_sorted(calibration, q);
    Mask out = make_mask(map.dims);
    for (std::size_t i = 0; i < map.values.size(); ++i)
        out.bits[i] = (map.values[i] < theta && mask.bits[i]) ? 1 : 0;
    return out;
}

Mask filter_components(const Mask& bin, Spacing spacing, double min_cm3) {
    if (!(spacing.sz > 0 && spacing.sy > 0 && spacing.sx > 0))
        throw ArgumentError("spacing must be positive");
    if (!(min_cm3 >= 0)) throw ArgumentError("min_cm3 must be >= 0");
    const auto lab = label_components_26(bin);
    const double voxel_cm3 = spacing.voxel_volume_mm3() / 1000.0;
    std::vector<std::uint32_t> keep;
    for (const auto& c : lab.components)
        if (double(c.voxels) * voxel_cm3 >= min_cm3) keep.push_back(c.label);
    return keep_labels(lab, keep);
}

PatientResult classify(const Mask& bin, Spacing spacing, double t_cm3) {
    if (!(t_cm3 >= 0.5 && t_cm3 <= 20.0))
        throw ArgumentError("decision threshold must be in [0.5, 20]");
    if (!(spacing.sz > 0 && spacing.sy > 0 && spacing.sx > 0))
        throw ArgumentError("spacing must be positive");
    PatientResult r;
    r.anomaly_volume_cm3 =
        double(bin.count()) * spacing.voxel_volume_mm3() / 1000.0;
    r.label = r.anomaly_volume_cm3 > t_cm3 ? PatientLabel::Abnormal
                                           : PatientLabel::Normal;
    return r;
}

std::vector<double> calibrate(std::vector<double> scores) {
    if (scores.size() < 100)
        throw CalibrationError("calibration needs at least 100 scores, got " +
                               std::to_string(scores.size()));
    std::sort(scores.begin(), scores.end());
    return scores;
}

std::string patient_result_json(const PatientResult& r, double threshold_T,
                                bool include_patch_scores) {
    nlohmann::ordered_json j;
    j["anomaly_volume_cm3"] = r.anomaly_volume_cm3;
    j["label"] = r.label == PatientLabel::Abnormal ? "Abnormal" : "Normal";
    j["threshold_T"] = threshold_T;
    j["n_patches"] = r.patch_scores.size();
    if (!r.logp_map_path.empty()) j["logp_map_path"] = r.logp_map_path;
    if (include_patch_scores) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& s : r.patch_scores) {
            nlohmann::ordered_json e;
            e["origin"] = {s.origin.z, s.origin.y, s.origin.x};
            e["per_dim_nats"] = s.per_dim_nats;
            arr.push_back(std::move(e));
        }
        j["per_patch_scores"] = std::move(arr);
    }
    return j.dump(2);
}

Volume logp_map_volume(const LogPMap& map, Spacing spacing) {
    Volume v;
    v.dims = map.dims;
    v.spacing = spacing;
    v.value_space = ValueSpace::Map;
    v.voxels.resize(map.values.size());
    for (std::size_t i = 0; i < map.values.size(); ++i)
        v.voxels[i] = float(map.values[i]);
    return v;
}

}  // namespace volflow
