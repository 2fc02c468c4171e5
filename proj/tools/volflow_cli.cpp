#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "config_file.hpp"
#include "e2e.hpp"
#include "volflow/errors.hpp"
#include "volflow/flow/checkpoint.hpp"
#include "volflow/metrics.hpp"
#include "volflow/pipeline.hpp"
#include "volflow/preprocess.hpp"
#include "volflow/synthetic.hpp"
#include "volflow/training.hpp"

namespace fs = std::filesystem;
using namespace volflow;

namespace {

struct VolumePair {
    std::string id;
    fs::path vol;
    fs::path mask;  // empty when absent
};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() > suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Directory convention: <id>.vol.rvol, optionally <id>.mask.rvol. When a
// directory holds no *.vol.rvol at all and `allow_bare` is set, every
// *.rvol file is taken as a standalone volume (pre-extracted patches).
std::vector<VolumePair> find_pairs(const fs::path& dir,
                                   bool allow_bare = false) {
    if (!fs::is_directory(dir))
        throw IoError("not a directory: " + dir.string());
    std::vector<VolumePair> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (!ends_with(name, ".vol.rvol")) continue;
        VolumePair p;
        p.id = name.substr(0, name.size() - 9);
        p.vol = e.path();
        const fs::path m = dir / (p.id + ".mask.rvol");
        if (fs::exists(m)) p.mask = m;
        out.push_back(std::move(p));
    }
    if (out.empty() && allow_bare) {
        for (const auto& e : fs::directory_iterator(dir)) {
            if (!e.is_regular_file()) continue;
            const std::string name = e.path().filename().string();
            if (!ends_with(name, ".rvol") || ends_with(name, ".mask.rvol"))
                continue;
            VolumePair p;
            p.id = name.substr(0, name.size() - 5);
            p.vol = e.path();
            out.push_back(std::move(p));
        }
    }
    std::sort(out.begin(), out.end(),
              [](const VolumePair& a, const VolumePair& b) {
                  return a.id < b.id;
              });
    if (out.empty())
        throw IoError("no *.vol.rvol files in " + dir.string());
    return out;
}

Mask mask_or_full(const VolumePair& p, Dims dims) {
    if (p.mask.empty()) return make_mask(dims, true);
    Mask m = read_mask(p.mask);
    if (!(m.dims == dims))
        throw ShapeError("mask dims mismatch for " + p.id);
    return m;
}

std::vector<double> read_calibration(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open calibration file: " + path.string());
    std::vector<double> v;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::size_t used = 0;
        const double x = std::stod(line, &used);
        if (used == 0) throw FormatError("bad calibration line: " + line);
        v.push_back(x);
    }
    return calibrate(std::move(v));
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

struct GenSynthArgs {
    std::string out;
    std::uint32_t count = 10;
    double lesioned_fraction = 0.0;
    std::uint32_t dim = 64;
    double spacing = 2.0;
    std::uint64_t seed = 1;
    double lesion_radius_lo = 4.0;
    double lesion_radius_hi = 6.0;
};

int run_gen_synth(const GenSynthArgs& a) {
    if (a.lesioned_fraction < 0 || a.lesioned_fraction > 1)
        throw ArgumentError("--lesioned-fraction must be in [0, 1]");
    fs::create_directories(a.out);
    const std::uint32_t n_lesioned =
        std::uint32_t(std::lround(double(a.count) * a.lesioned_fraction));
    std::ostringstream labels;
    labels << "id,label\n";
    for (std::uint32_t i = 0; i < a.count; ++i) {
        const bool lesioned = i >= a.count - n_lesioned;
        SynthSpec sp;
        sp.dims = {a.dim, a.dim, a.dim};
        sp.spacing = {float(a.spacing), float(a.spacing), float(a.spacing)};
        sp.seed = Rng::derive(a.seed, 0x100 + i);
        if (lesioned) {
            Rng lrng(Rng::derive(a.seed, 0x2000 + i));
            sp.lesion_count = 1 + std::uint32_t(lrng.uniform_index(3));
            sp.lesion_radius_mm =
                float(lrng.uniform(a.lesion_radius_lo, a.lesion_radius_hi));
        }
        const SynthVolume sv = generate_synthetic(sp);
        char buf[16];
        std::snprintf(buf, sizeof buf, "synth_%03u", i);
        const std::string id = buf;
        write_volume(sv.volume, fs::path(a.out) / (id + ".vol.rvol"));
        write_mask(sv.lung, sv.volume.spacing,
                   fs::path(a.out) / (id + ".mask.rvol"));
        if (lesioned)
            write_mask(sv.lesions, sv.volume.spacing,
                       fs::path(a.out) / (id + ".lesions.rvol"));
        labels << id << ',' << (lesioned ? 1 : 0) << '\n';
    }
    write_text_file(fs::path(a.out) / "labels.csv", labels.str());
    std::cout << "wrote " << a.count << " synthetic subjects ("
              << n_lesioned << " lesioned) to " << a.out << "\n";
    return 0;
}

struct PreprocessArgs {
    std::string in, out, mask_in, mask_out;
    double spacing = 2.0;
    double hu_min = -1020.0, hu_max = 200.0;
};

int run_preprocess(const PreprocessArgs& a) {
    PreprocessConfig cfg;
    cfg.target_spacing_mm = a.spacing;
    cfg.hu_min = a.hu_min;
    cfg.hu_max = a.hu_max;

    const Volume in = read_volume(a.in);
    const Volume res = resample(in, cfg.target_spacing_mm);
    if (!a.mask_out.empty()) {
        Mask m;
        if (!a.mask_in.empty()) {
            const Mask src = read_mask(a.mask_in);
            if (!(src.dims == in.dims))
                throw ShapeError("--mask-in dims do not match --in");
            m = resample_mask(src, in.spacing, cfg.target_spacing_mm);
        } else {
            m = fallback_lung_mask(res);
        }
        write_mask(m, res.spacing, a.mask_out);
    } else if (!a.mask_in.empty()) {
        throw ArgumentError("--mask-in given without --mask-out");
    }
    const Volume norm = clip_normalize(res, cfg);
    write_volume(norm, a.out);
    std::cout << "preprocessed " << a.in << " -> " << a.out << " ("
              << norm.dims.d << "x" << norm.dims.h << "x" << norm.dims.w
              << " @ " << a.spacing << " mm)\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, config, log;
};

int run_train(const TrainArgs& a) {
    FlowConfig fcfg;
    TrainConfig tcfg;
    double min_mask_fraction = 0.5;
    if (!a.config.empty()) {
        ConfigMap c = ConfigMap::from_file(a.config);
        fcfg.levels = c.get_u32("levels", fcfg.levels);
        fcfg.flows = c.get_u32("flows", fcfg.flows);
        fcfg.patch_edge = c.get_u32("patch_edge", fcfg.patch_edge);
        fcfg.coupling_hidden = c.get_u32("hidden", fcfg.coupling_hidden);
        fcfg.scale_clamp =
            float(c.get_f64("scale_clamp", fcfg.scale_clamp));
        tcfg.iterations = c.get_u32("iterations", tcfg.iterations);
        tcfg.batch_size = c.get_u32("batch_size", tcfg.batch_size);
        tcfg.lr = c.get_f64("lr", tcfg.lr);
        tcfg.weight_decay = c.get_f64("weight_decay", tcfg.weight_decay);
        tcfg.adam_beta1 = c.get_f64("adam_beta1", tcfg.adam_beta1);
        tcfg.adam_beta2 = c.get_f64("adam_beta2", tcfg.adam_beta2);
        tcfg.adam_eps = c.get_f64("adam_eps", tcfg.adam_eps);
        tcfg.seed = c.get_u64("seed", tcfg.seed);
        tcfg.dequant_bin = c.get_f64("dequant_bin", tcfg.dequant_bin);
        tcfg.grad_clip_norm =
            c.get_f64("grad_clip_norm", tcfg.grad_clip_norm);
        tcfg.log_every = c.get_u32("log_every", tcfg.log_every);
        tcfg.checkpoint_every =
            c.get_u32("checkpoint_every", tcfg.checkpoint_every);
        tcfg.threads = c.get_u32("threads", tcfg.threads);
        min_mask_fraction =
            c.get_f64("min_mask_fraction", min_mask_fraction);
        c.finish();
    }

    std::vector<Volume> vols;
    std::vector<Mask> masks;
    for (const auto& p : find_pairs(a.data, /*allow_bare=*/true)) {
        Volume v = read_volume(p.vol);
        if (v.value_space != ValueSpace::Normalized)
            throw ArgumentError("training volume is not normalized: " +
                                p.vol.string());
        masks.push_back(mask_or_full(p, v.dims));
        vols.push_back(std::move(v));
    }
    std::cout << "training on " << vols.size() << " volumes, "
              << tcfg.iterations << " iterations\n";
    VolumePatchSource source(std::move(vols), std::move(masks),
                             fcfg.patch_edge, min_mask_fraction,
                             Rng::derive(tcfg.seed, 1));
    const TrainState state = train(source, fcfg, tcfg, a.out, a.log);
    std::cout << "final loss " << std::setprecision(6)
              << state.bpd_history.back() << " bits/dim, checkpoint " << a.out
              << "\n";
    return 0;
}

struct CalibrateArgs {
    std::string data, model, out;
    std::uint32_t overlap = 10;
    double min_mask_fraction = 0.5;
    std::uint32_t threads = 1;
};

int run_calibrate(const CalibrateArgs& a) {
    const FlowModel<double> model = load_checkpoint<double>(a.model);
    GridSpec grid;
    grid.patch_edge = model.config.patch_edge;
    grid.overlap = a.overlap;
    std::vector<double> scores;
    for (const auto& p : find_pairs(a.data)) {
        const Volume v = read_volume(p.vol);
        const Mask m = mask_or_full(p, v.dims);
        const MaskCoverage cov(m);
        for (const auto& ps : score_volume(v, m, model, grid, a.threads))
            if (cov.fraction(ps.origin, grid.patch_edge) >=
                a.min_mask_fraction)
                scores.push_back(ps.per_dim_nats);
    }
    const std::vector<double> cal = calibrate(std::move(scores));
    std::ostringstream ss;
    ss << std::setprecision(17);
    for (const double v : cal) ss << v << '\n';
    write_text_file(a.out, ss.str());
    std::cout << "calibration: " << cal.size() << " patch scores -> " << a.out
              << "\n";
    return 0;
}

struct ScoreArgs {
    std::string volume, mask, model, calibration, out_json, out_map, config;
    std::uint32_t overlap = 10;
    double sigma = 2.0;
    double quantile = 0.02;
    double min_component = 0.1;
    double threshold_T = 0.5;
    std::uint32_t threads = 1;
    bool with_patch_scores = false;
};

// Config file values apply first; flags given on the command line win.
void apply_score_config(ScoreArgs& a, const CLI::App& sub) {
    ConfigMap c = ConfigMap::from_file(a.config);
    if (!sub.count("--overlap")) a.overlap = c.get_u32("overlap", a.overlap);
    if (!sub.count("--sigma")) a.sigma = c.get_f64("sigma", a.sigma);
    if (!sub.count("--quantile"))
        a.quantile = c.get_f64("quantile", a.quantile);
    if (!sub.count("--min-component"))
        a.min_component = c.get_f64("min_component", a.min_component);
    if (!sub.count("--threshold-T"))
        a.threshold_T = c.get_f64("threshold_T", a.threshold_T);
    if (!sub.count("--threads")) a.threads = c.get_u32("threads", a.threads);
    c.finish();
}

int run_score(const ScoreArgs& a) {
    const FlowModel<double> model = load_checkpoint<double>(a.model);
    const Volume v = read_volume(a.volume);
    const Mask m = a.mask.empty() ? make_mask(v.dims, true)
                                  : read_mask(a.mask);
    const std::vector<double> cal = read_calibration(a.calibration);

    GridSpec grid;
    grid.patch_edge = model.config.patch_edge;
    grid.overlap = a.overlap;
    const std::vector<PatchScore> scores =
        score_volume(v, m, model, grid, a.threads);
    const LogPMap map = aggregate_map(scores, v.dims, grid, a.sigma);
    const Mask bin = binarize(map, m, cal, a.quantile);
    const Mask flagged = filter_components(bin, v.spacing, a.min_component);
    PatientResult r = classify(flagged, v.spacing, a.threshold_T);
    r.patch_scores = scores;
    if (!a.out_map.empty()) {
        write_volume(logp_map_volume(map, v.spacing), a.out_map);
        r.logp_map_path = a.out_map;
    }
    write_text_file(a.out_json,
                    patient_result_json(r, a.threshold_T,
                                        a.with_patch_scores));
    std::cout << (r.label == PatientLabel::Abnormal ? "Abnormal" : "Normal")
              << " (" << std::setprecision(6) << r.anomaly_volume_cm3
              << " cm^3 flagged, T = " << a.threshold_T << ")\n";
    return 0;
}

struct EvaluateArgs {
    std::string scores, threshold_from, out, roc_csv;
};

int run_evaluate(const EvaluateArgs& a) {
    const std::vector<LabeledScore> test = read_scores_csv(a.scores);
    double T = 0;
    try {
        std::size_t used = 0;
        T = std::stod(a.threshold_from, &used);
        if (used != a.threshold_from.size()) throw std::invalid_argument("");
    } catch (const std::invalid_argument&) {
        T = select_threshold(read_scores_csv(a.threshold_from));
    }
    const Metrics m = evaluate(test, T);
    write_text_file(a.out, metrics_json(m));
    if (!a.roc_csv.empty()) write_roc_csv(a.roc_csv, m.roc_points);
    std::cout << std::setprecision(6) << "auroc " << m.auroc << "  f1 "
              << m.f1 << "  accuracy " << m.accuracy << "  T " << m.chosen_T
              << "\n";
    return 0;
}

int run_e2e_cmd(const E2EConfig& cfg) {
    const E2EReport rep = run_e2e(cfg);
    const double drop =
        rep.initial_bpd != 0.0
            ? 100.0 * (rep.initial_bpd - rep.final_bpd) /
                  std::fabs(rep.initial_bpd)
            : 0.0;
    std::cout << std::setprecision(6);
    std::cout << "bits/dim " << rep.initial_bpd << " -> " << rep.final_bpd
              << " (" << drop << "% drop)\n";
    std::cout << "auroc " << rep.auroc << "  f1 " << rep.f1 << "  accuracy "
              << rep.accuracy << "  T " << rep.chosen_T << " cm^3\n";
    std::cout << "patch nats: lesion " << rep.mean_nats_lesion_patches
              << ", normal " << rep.mean_nats_normal_patches << "\n";
    std::cout << "calibration n = " << rep.n_calibration << ", wallclock "
              << rep.wallclock_s << " s\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "volflow: patch-based 3D normalizing-flow anomaly detection"};
    app.require_subcommand(1);

    GenSynthArgs gs;
    auto* c_gs = app.add_subcommand("gen-synth",
                                    "Generate synthetic chest volumes");
    c_gs->add_option("--out", gs.out, "output directory")->required();
    c_gs->add_option("--count", gs.count, "number of subjects");
    c_gs->add_option("--lesioned-fraction", gs.lesioned_fraction,
                     "fraction of subjects given lesions (placed last)");
    c_gs->add_option("--dim", gs.dim, "cube edge in voxels");
    c_gs->add_option("--spacing", gs.spacing, "voxel spacing in mm");
    c_gs->add_option("--seed", gs.seed, "master seed");
    c_gs->add_option("--lesion-radius-lo", gs.lesion_radius_lo,
                     "min lesion radius in mm");
    c_gs->add_option("--lesion-radius-hi", gs.lesion_radius_hi,
                     "max lesion radius in mm");

    PreprocessArgs pp;
    auto* c_pp = app.add_subcommand(
        "preprocess", "Resample to isotropic spacing and normalize");
    c_pp->add_option("--in", pp.in, "input HU volume (.rvol)")->required();
    c_pp->add_option("--out", pp.out, "output normalized volume")->required();
    c_pp->add_option("--mask-in", pp.mask_in, "lung mask matching --in");
    c_pp->add_option("--mask-out", pp.mask_out,
                     "resampled mask output (threshold fallback when no "
                     "--mask-in)");
    c_pp->add_option("--spacing", pp.spacing, "target spacing in mm");
    c_pp->add_option("--hu-min", pp.hu_min, "clip floor in HU");
    c_pp->add_option("--hu-max", pp.hu_max, "clip ceiling in HU");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "Train a flow on normal volumes");
    c_tr->add_option("--data", tr.data,
                     "directory of <id>.vol.rvol (+ <id>.mask.rvol)")
        ->required();
    c_tr->add_option("--out", tr.out, "checkpoint path (.rflw)")->required();
    c_tr->add_option("--config", tr.config, "key=value config file");
    c_tr->add_option("--log", tr.log, "training log CSV");

    CalibrateArgs ca;
    auto* c_ca = app.add_subcommand(
        "calibrate", "Collect patch scores from normal volumes");
    c_ca->add_option("--data", ca.data, "directory of normal volumes")
        ->required();
    c_ca->add_option("--model", ca.model, "checkpoint path")->required();
    c_ca->add_option("--out", ca.out, "calibration output file")->required();
    c_ca->add_option("--overlap", ca.overlap, "grid overlap in voxels");
    c_ca->add_option("--min-mask-fraction", ca.min_mask_fraction,
                     "minimum mask coverage per kept patch");
    c_ca->add_option("--threads", ca.threads, "scoring threads");

    ScoreArgs sc;
    auto* c_sc = app.add_subcommand("score",
                                    "Score one volume and classify it");
    c_sc->add_option("--volume", sc.volume, "normalized volume")->required();
    c_sc->add_option("--mask", sc.mask, "lung mask (full mask when absent)");
    c_sc->add_option("--model", sc.model, "checkpoint path")->required();
    c_sc->add_option("--calibration", sc.calibration, "calibration file")
        ->required();
    c_sc->add_option("--out-json", sc.out_json, "result JSON path")
        ->required();
    c_sc->add_option("--out-map", sc.out_map, "log-likelihood map (.rvol)");
    c_sc->add_option("--config", sc.config,
                     "key=value pipeline config (flags override)");
    c_sc->add_option("--overlap", sc.overlap, "grid overlap in voxels");
    c_sc->add_option("--sigma", sc.sigma, "map smoothing sigma in voxels");
    c_sc->add_option("--quantile", sc.quantile, "binarization quantile");
    c_sc->add_option("--min-component", sc.min_component,
                     "component floor in cm^3");
    c_sc->add_option("--threshold-T", sc.threshold_T,
                     "decision threshold in cm^3");
    c_sc->add_option("--threads", sc.threads, "scoring threads");
    c_sc->add_flag("--with-patch-scores", sc.with_patch_scores,
                   "include per-patch scores in the JSON");

    EvaluateArgs ev;
    auto* c_ev = app.add_subcommand("evaluate",
                                    "Metrics from a scores CSV");
    c_ev->add_option("--scores", ev.scores, "test scores CSV")->required();
    c_ev->add_option("--threshold-from", ev.threshold_from,
                     "validation CSV for threshold selection, or a fixed "
                     "value in cm^3")
        ->required();
    c_ev->add_option("--out", ev.out, "metrics JSON path")->required();
    c_ev->add_option("--roc-csv", ev.roc_csv, "ROC curve CSV path");

    E2EConfig e2;
    auto* c_e2 = app.add_subcommand(
        "e2e-synth", "Full synthetic pipeline: generate, train, evaluate");
    c_e2->add_option("--out", e2.out_dir, "output directory")->required();
    c_e2->add_option("--seed", e2.seed, "master seed");
    c_e2->add_option("--train-n", e2.train_n, "training subjects");
    c_e2->add_option("--val-n", e2.val_n, "validation subjects");
    c_e2->add_option("--test-n", e2.test_n, "test subjects");
    c_e2->add_option("--dim", e2.dim, "cube edge in voxels");
    c_e2->add_option("--spacing", e2.spacing_mm, "voxel spacing in mm");
    c_e2->add_option("--lesion-radius-lo", e2.lesion_radius_lo_mm,
                     "min lesion radius in mm");
    c_e2->add_option("--lesion-radius-hi", e2.lesion_radius_hi_mm,
                     "max lesion radius in mm");
    c_e2->add_option("--levels", e2.levels, "flow levels");
    c_e2->add_option("--flows", e2.flows, "steps per level");
    c_e2->add_option("--patch-edge", e2.patch_edge, "patch edge in voxels");
    c_e2->add_option("--hidden", e2.hidden, "coupling hidden channels");
    c_e2->add_option("--iterations", e2.iterations, "optimizer steps");
    c_e2->add_option("--batch-size", e2.batch_size, "patches per step");
    c_e2->add_option("--lr", e2.lr, "learning rate");
    c_e2->add_option("--weight-decay", e2.weight_decay, "weight decay");
    c_e2->add_option("--min-mask-fraction", e2.min_mask_fraction,
                     "minimum lung coverage per training patch");
    c_e2->add_option("--overlap", e2.overlap, "inference grid overlap");
    c_e2->add_option("--sigma", e2.smoothing_sigma_vox,
                     "map smoothing sigma in voxels");
    c_e2->add_option("--quantile", e2.binarize_quantile,
                     "binarization quantile");
    c_e2->add_option("--min-component", e2.min_component_cm3,
                     "component floor in cm^3");
    c_e2->add_option("--threads", e2.threads, "worker threads");
    c_e2->add_flag("--write-maps", e2.write_maps,
                   "write per-subject log-likelihood maps");
    c_e2->add_flag("--write-volumes", e2.write_volumes,
                   "write the generated volumes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_gs->parsed()) return run_gen_synth(gs);
        if (c_pp->parsed()) return run_preprocess(pp);
        if (c_tr->parsed()) return run_train(tr);
        if (c_ca->parsed()) return run_calibrate(ca);
        if (c_sc->parsed()) {
            if (!sc.config.empty()) apply_score_config(sc, *c_sc);
            return run_score(sc);
        }
        if (c_ev->parsed()) return run_evaluate(ev);
        if (c_e2->parsed()) return run_e2e_cmd(e2);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
