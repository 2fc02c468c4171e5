#include "e2e.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "volflow/errors.hpp"
#include "volflow/flow/checkpoint.hpp"
#include "volflow/metrics.hpp"
#include "volflow/pipeline.hpp"
#include "volflow/preprocess.hpp"
#include "volflow/synthetic.hpp"
#include "volflow/training.hpp"

namespace volflow {

namespace {

namespace fs = std::filesystem;

struct Subject {
    std::string id;
    bool lesioned = false;
    Volume volume;  ///< preprocessed, normalized
    Mask lung;
    Mask lesions;
    std::vector<PatchScore> scores;
};

Subject make_subject(const E2EConfig& cfg, const std::string& id,
                     std::uint64_t global_index, bool lesioned) {
    SynthSpec sp;
    sp.dims = {cfg.dim, cfg.dim, cfg.dim};
    sp.spacing = {float(cfg.spacing_mm), float(cfg.spacing_mm),
                  float(cfg.spacing_mm)};
    sp.seed = Rng::derive(cfg.seed, 0x100 + global_index);
    if (lesioned) {
        Rng lrng(Rng::derive(cfg.seed, 0x2000 + global_index));
        sp.lesion_count = 1 + std::uint32_t(lrng.uniform_index(3));
        sp.lesion_radius_mm = float(
            lrng.uniform(cfg.lesion_radius_lo_mm, cfg.lesion_radius_hi_mm));
    }
    SynthVolume sv = generate_synthetic(sp);

    PreprocessConfig pp;
    pp.target_spacing_mm = cfg.spacing_mm;
    Subject s;
    s.id = id;
    s.lesioned = lesioned;
    const Volume res = resample(sv.volume, pp.target_spacing_mm);
    s.lung = resample_mask(sv.lung, sv.volume.spacing, pp.target_spacing_mm);
    s.lesions =
        resample_mask(sv.lesions, sv.volume.spacing, pp.target_spacing_mm);
    s.volume = clip_normalize(res, pp);
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace

E2EReport run_e2e(const E2EConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.out_dir.empty()) throw ArgumentError("e2e needs an output dir");
    if (cfg.val_n < 2 || cfg.test_n < 2)
        throw ArgumentError("validation and test sets need both classes");
    const fs::path out = cfg.out_dir;
    fs::create_directories(out / "results");

    // --- data ---------------------------------------------------------
    auto pad = [](std::uint32_t i) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%02u", i);
        return std::string(buf);
    };
    std::vector<Subject> train, val, test;
    std::uint64_t gi = 0;
    for (std::uint32_t i = 0; i < cfg.train_n; ++i, ++gi)
        train.push_back(make_subject(cfg, "train_" + pad(i), gi, false));
    for (std::uint32_t i = 0; i < cfg.val_n; ++i, ++gi)
        val.push_back(
            make_subject(cfg, "val_" + pad(i), gi, i >= cfg.val_n / 2));
    for (std::uint32_t i = 0; i < cfg.test_n; ++i, ++gi)
        test.push_back(
            make_subject(cfg, "test_" + pad(i), gi, i >= cfg.test_n / 2));

    if (cfg.write_volumes) {
        fs::create_directories(out / "volumes");
        for (const auto* set : {&train, &val, &test}) {
            for (const auto& s : *set) {
                write_volume(s.volume,
                             out / "volumes" / (s.id + ".vol.rvol"));
                write_mask(s.lung, s.volume.spacing,
                           out / "volumes" / (s.id + ".mask.rvol"));
                if (s.lesioned)
                    write_mask(s.lesions, s.volume.spacing,
                               out / "volumes" / (s.id + ".lesions.rvol"));
            }
        }
    }

    // --- training -------------------------------------------------------
    FlowConfig fcfg;
    fcfg.levels = cfg.levels;
    fcfg.flows = cfg.flows;
    fcfg.patch_edge = cfg.patch_edge;
    fcfg.in_channels = 1;
    fcfg.coupling_hidden = cfg.hidden;

    TrainConfig tcfg;
    tcfg.iterations = cfg.iterations;
    tcfg.batch_size = cfg.batch_size;
    tcfg.lr = cfg.lr;
    tcfg.weight_decay = cfg.weight_decay;
    tcfg.seed = Rng::derive(cfg.seed, 2);
    tcfg.threads = cfg.threads;

    TrainState state = [&] {
        std::vector<Volume> vols;
        std::vector<Mask> masks;
        for (const auto& s : train) {
            vols.push_back(s.volume);
            masks.push_back(s.lung);
        }
        VolumePatchSource source(std::move(vols), std::move(masks),
                                 cfg.patch_edge, cfg.min_mask_fraction,
                                 Rng::derive(cfg.seed, 1));
        return volflow::train(source, fcfg, tcfg,
                              (out / "model.rflw").string(),
                              (out / "train_log.csv").string());
    }();

    E2EReport rep;
    if (!state.bpd_history.empty()) {
        rep.initial_bpd = state.bpd_history.front();
        const std::size_t tail =
            std::max<std::size_t>(1, state.bpd_history.size() / 10);
        double acc = 0;
        for (std::size_t i = state.bpd_history.size() - tail;
             i < state.bpd_history.size(); ++i)
            acc += state.bpd_history[i];
        rep.final_bpd = acc / double(tail);
    }

    // --- scoring ----------------------------------------------------------
    const FlowModel<double>& model = state.model;
    GridSpec grid;
    grid.patch_edge = cfg.patch_edge;
    grid.overlap = cfg.overlap;
    for (auto* set : {&val, &test})
        for (auto& s : *set)
            s.scores = score_volume(s.volume, s.lung, model, grid, cfg.threads);

    // --- calibration from validation normals ------------------------------
    std::vector<double> cal;
    for (const auto& s : val) {
        if (s.lesioned) continue;
        const MaskCoverage cov(s.lung);
        for (const auto& ps : s.scores)
            if (cov.fraction(ps.origin, grid.patch_edge) >=
                cfg.min_mask_fraction)
                cal.push_back(ps.per_dim_nats);
    }
    const std::vector<double> calibration = calibrate(std::move(cal));
    rep.n_calibration = calibration.size();
    {
        std::ostringstream ss;
        ss << std::setprecision(17);
        for (const double v : calibration) ss << v << '\n';
        write_text(out / "calibration.txt", ss.str());
    }

    // --- per-subject anomaly volume ---------------------------------------
    struct Outcome {
        LogPMap map;
        Mask flagged;
        double volume_cm3 = 0;
    };
    auto post_process = [&](const Subject& s) {
        Outcome o;
        o.map = aggregate_map(s.scores, s.volume.dims, grid,
                              cfg.smoothing_sigma_vox);
        const Mask bin =
            binarize(o.map, s.lung, calibration, cfg.binarize_quantile);
        o.flagged =
            filter_components(bin, s.volume.spacing, cfg.min_component_cm3);
        o.volume_cm3 = double(o.flagged.count()) *
                       s.volume.spacing.voxel_volume_mm3() / 1000.0;
        return o;
    };

    std::vector<Outcome> val_out, test_out;
    std::vector<LabeledScore> val_ls, test_ls;
    for (const auto& s : val) {
        val_out.push_back(post_process(s));
        val_ls.push_back({s.id, val_out.back().volume_cm3,
                          s.lesioned ? SubjectLabel::Abnormal
                                     : SubjectLabel::Normal});
    }
    for (const auto& s : test) {
        test_out.push_back(post_process(s));
        test_ls.push_back({s.id, test_out.back().volume_cm3,
                           s.lesioned ? SubjectLabel::Abnormal
                                      : SubjectLabel::Normal});
    }
    write_scores_csv((out / "val_scores.csv").string(), val_ls);
    write_scores_csv((out / "test_scores.csv").string(), test_ls);

    // --- threshold selection and evaluation --------------------------------
    rep.chosen_T = select_threshold(val_ls);
    const Metrics m = evaluate(test_ls, rep.chosen_T);
    rep.auroc = m.auroc;
    rep.f1 = m.f1;
    rep.accuracy = m.accuracy;
    write_text(out / "metrics.json", metrics_json(m));
    write_roc_csv((out / "roc.csv").string(), m.roc_points);

    auto emit_result = [&](const Subject& s, const Outcome& o) {
        PatientResult r =
            classify(o.flagged, s.volume.spacing, rep.chosen_T);
        r.patch_scores = s.scores;
        if (cfg.write_maps) {
            const std::string rel = "results/" + s.id + ".map.rvol";
            write_volume(logp_map_volume(o.map, s.volume.spacing),
                         (out / rel).string());
            r.logp_map_path = rel;
        }
        write_text(out / "results" / (s.id + ".json"),
                   patient_result_json(r, rep.chosen_T, true));
    };
    for (std::size_t i = 0; i < val.size(); ++i) emit_result(val[i], val_out[i]);
    for (std::size_t i = 0; i < test.size(); ++i)
        emit_result(test[i], test_out[i]);

    // --- lesion vs normal patch scores over the test set -------------------
    double lesion_sum = 0, normal_sum = 0;
    std::size_t lesion_n = 0, normal_n = 0;
    for (const auto& s : test) {
        const MaskCoverage lung_cov(s.lung);
        const MaskCoverage lesion_cov(s.lesions);
        for (const auto& ps : s.scores) {
            if (lung_cov.fraction(ps.origin, grid.patch_edge) <
                cfg.min_mask_fraction)
                continue;
            if (lesion_cov.box_count(ps.origin, grid.patch_edge) > 0) {
                lesion_sum += ps.per_dim_nats;
                ++lesion_n;
            } else {
                normal_sum += ps.per_dim_nats;
                ++normal_n;
            }
        }
    }
    rep.mean_nats_lesion_patches =
        lesion_n ? lesion_sum / double(lesion_n)
                 : std::numeric_limits<double>::quiet_NaN();
    rep.mean_nats_normal_patches =
        normal_n ? normal_sum / double(normal_n)
                 : std::numeric_limits<double>::quiet_NaN();

    rep.wallclock_s = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count();

    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["train_n"] = cfg.train_n;
    j["val_n"] = cfg.val_n;
    j["test_n"] = cfg.test_n;
    j["dim"] = cfg.dim;
    j["spacing_mm"] = cfg.spacing_mm;
    j["model"] = {{"levels", cfg.levels},
                  {"flows", cfg.flows},
                  {"patch_edge", cfg.patch_edge},
                  {"hidden", cfg.hidden}};
    j["training"] = {{"iterations", cfg.iterations},
                     {"batch_size", cfg.batch_size},
                     {"lr", cfg.lr},
                     {"weight_decay", cfg.weight_decay},
                     {"threads", cfg.threads}};
    j["initial_bits_per_dim"] = rep.initial_bpd;
    j["final_bits_per_dim"] = rep.final_bpd;
    j["auroc"] = rep.auroc;
    j["f1"] = rep.f1;
    j["accuracy"] = rep.accuracy;
    j["chosen_T_cm3"] = rep.chosen_T;
    j["mean_nats_lesion_patches"] = rep.mean_nats_lesion_patches;
    j["mean_nats_normal_patches"] = rep.mean_nats_normal_patches;
    j["n_calibration_scores"] = rep.n_calibration;
    j["wallclock_s"] = rep.wallclock_s;
    write_text(out / "report.json", j.dump(2));
    return rep;
}

}  // namespace volflow
