#include "kv2ct/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "kv2ct/compose.hpp"
#include "kv2ct/dose.hpp"
#include "kv2ct/grss.hpp"
#include "kv2ct/model.hpp"
#include "kv2ct/png_io.hpp"
#include "kv2ct/training.hpp"

namespace fs = std::filesystem;

namespace kv2ct {

namespace {

// ---- workspace layout ----

struct Paths {
    std::string ws;

    explicit Paths(const std::string& workspace) : ws(workspace) {}

    std::string abs(const std::string& rel) const { return ws + "/" + rel; }

    // stage directories
    std::string phantom_dir() const { return abs("phantom"); }
    std::string project_dir() const { return abs("project"); }
    std::string augment_dir() const { return abs("augment"); }
    std::string train_dir() const { return abs("train"); }
    std::string synth_dir() const { return abs("synth"); }
    std::string compose_dir() const { return abs("compose"); }
    std::string eval_dir() const { return abs("eval"); }

    // relative artifact paths (stored in the report; the report must not
    // contain absolute paths so identical runs in different directories
    // serialize identically)
    std::string gct_rel() const { return "phantom/gct"; }
    std::string kv0_rel() const { return "project/kv0"; }
    std::string regions_rel() const { return "augment/regions.json"; }
    std::string pairs_rel(const std::string& tag) const { return "augment/" + tag + "/pairs.json"; }
    std::string ckpt_rel(const std::string& tag) const { return "train/" + tag; }
    std::string loss_rel(const std::string& tag) const { return "train/" + tag + ".loss.csv"; }
    std::string sgct_rel() const { return "synth/sgct"; }
    std::string kv_eval_rel() const { return "synth/kv_eval"; }
    std::string model_out_rel(const std::string& tag) const { return "synth/" + tag + "_out"; }
    std::string ssct_rel() const { return "compose/ssct"; }
    std::string primary_only_rel() const { return "compose/primary_only"; }
    std::string metrics_rel() const { return "eval/metrics.json"; }
    std::string cdvh_rel() const { return "eval/cdvh.csv"; }
    std::string dose_rel(const std::string& which) const { return "eval/dose_" + which; }
    std::string slice_rel() const { return "eval/slice_head.png"; }
    std::string report_rel() const { return "report.json"; }

    // stage markers
    std::string marker(const std::string& stage) const { return abs(stage + "/stage.json"); }
    std::string train_marker(const std::string& tag) const {
        return abs("train/" + tag + ".stage.json");
    }
};

void logline(std::ostream* log, const std::string& s) {
    if (log) (*log) << s << std::endl;
}

bool file_exists(const std::string& path) {
    std::error_code ec;
    return fs::exists(path, ec);
}

// Volumes and kV pairs live as <stem>.json + <stem>.raw.
bool stem_exists(const std::string& stem) {
    return file_exists(stem + ".json") && file_exists(stem + ".raw");
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

void require_file(const std::string& path, const std::string& what) {
    if (!file_exists(path))
        throw IoError("missing " + what + " at " + path + " (run the earlier stages first)");
}

void require_stem(const std::string& stem, const std::string& what) {
    if (!stem_exists(stem))
        throw IoError("missing " + what + " at " + stem + ".{json,raw} (run the earlier stages first)");
}

// ---- stage markers: {"config_hash": ..., "extras": {...}} ----

void write_marker(const std::string& path, const std::string& hash,
                  const std::map<std::string, double>& extras = {}) {
    nlohmann::json j;
    j["config_hash"] = hash;
    j["extras"] = nlohmann::json::object();
    for (const auto& [k, v] : extras) j["extras"][k] = v;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write stage marker " + path);
    out << j.dump(2) << "\n";
    if (!out.good()) throw IoError("write failed for stage marker " + path);
}

bool marker_ok(const std::string& path, const std::string& hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        return j.value("config_hash", std::string()) == hash;
    } catch (const nlohmann::json::exception&) {
        return false;
    }
}

std::map<std::string, double> read_marker_extras(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read stage marker " + path);
    std::map<std::string, double> extras;
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        if (j.contains("extras"))
            for (auto it = j["extras"].begin(); it != j["extras"].end(); ++it)
                extras[it.key()] = it.value().get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed stage marker " + path + ": " + e.what());
    }
    return extras;
}

// Re-throws pipeline exceptions with the failing stage in the message.
template <typename F>
auto guarded(const char* stage, F&& f) {
    const std::string prefix = std::string("stage ") + stage + ": ";
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(prefix + e.what());
    } catch (const NumericError& e) {
        throw NumericError(prefix + e.what());
    } catch (const IoError& e) {
        throw IoError(prefix + e.what());
    }
}

// Secondary augmentation config with the crop origin resolved against the
// generated anatomy.
GrssConfig resolved_secondary(const RunConfig& cfg, const RunRegions& regions) {
    GrssConfig g = cfg.grss_secondary;
    g.kv_crop_origin = regions.secondary_kv_origin;
    return g;
}

// Model-output grid metadata for a crop box at a downsample factor: voxel
// centers sit at the block centers of the native-resolution crop.
VolumeMeta output_meta(const RunConfig& cfg, const BoxIndices& box,
                       const std::array<int, 3>& ds) {
    const auto org = cfg.phantom.origin_mm();
    VolumeMeta meta;
    for (int a = 0; a < 3; ++a) {
        meta.spacing_mm[a] = cfg.phantom.spacing_mm[a] * ds[a];
        meta.origin_mm[a] = org[a] + box.lo[a] * cfg.phantom.spacing_mm[a] +
                            0.5 * (ds[a] - 1) * cfg.phantom.spacing_mm[a];
    }
    return meta;
}

// Binary structure mask moved with the evaluation couch shift, then cropped.
// The mask rides the same trilinear transport as the CT and is re-binarized
// at half weight.
std::vector<std::uint8_t> shifted_cropped_mask(const std::vector<std::uint8_t>& mask,
                                               const Volume3D& grid_like, double delta_mm,
                                               const BoxIndices& box) {
    Volume3D m(grid_like.dims, grid_like.spacing_mm, grid_like.origin_mm, "mask", 0.0f);
    for (std::size_t i = 0; i < mask.size(); ++i) m.data[i] = mask[i] ? 1.0f : 0.0f;
    const Volume3D cropped = crop_volume(shift_volume(m, delta_mm, Axis::SI, 0.0f), box);
    std::vector<std::uint8_t> out(std::size_t(cropped.voxel_count()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = cropped.data[i] >= 0.5f ? 1 : 0;
    return out;
}

}  // namespace

// ---- region derivation ----

RunRegions derive_regions(const RunConfig& cfg, const StructureMaskSet& masks) {
    const auto& dims = cfg.phantom.dims;
    RunRegions r;
    for (int a = 0; a < 3; ++a) {
        if (cfg.primary_extent[a] > dims[a])
            throw ConfigError("primary extent exceeds phantom dims on axis " + axis_name(Axis(a)));
        r.primary_box.lo[a] = (dims[a] - cfg.primary_extent[a]) / 2;
        r.primary_box.hi[a] = r.primary_box.lo[a] + cfg.primary_extent[a] - 1;
    }

    const BoxIndices head = head_bbox(masks);
    for (int a = 0; a < 3; ++a) {
        const int center = (head.lo[a] + head.hi[a]) / 2;
        int lo = center - cfg.secondary_extent[a] / 2;
        // keep the fixed-extent head box inside the primary box
        lo = std::clamp(lo, r.primary_box.lo[a],
                        r.primary_box.hi[a] - cfg.secondary_extent[a] + 1);
        r.secondary_box.lo[a] = lo;
        r.secondary_box.hi[a] = lo + cfg.secondary_extent[a] - 1;
        r.head_box_local.lo[a] = r.secondary_box.lo[a] - r.primary_box.lo[a];
        r.head_box_local.hi[a] = r.secondary_box.hi[a] - r.primary_box.lo[a];
    }

    // Detector crop for the head model: v tracks the projected box center
    // (S-I magnified by SDD/SAD), u stays centered on the axis. Both are
    // clamped to origins that keep every enumerated phase inside the detector.
    const GrssConfig& g = cfg.grss_secondary;
    const int cu = g.kv_crop_size[0] > 0 ? g.kv_crop_size[0] : cfg.geometry.nu;
    const int cv = g.kv_crop_size[1] > 0 ? g.kv_crop_size[1] : cfg.geometry.nv;
    const int fu = g.kv_downsample[0], fv = g.kv_downsample[1];
    const auto clamp_origin = [](int want, int n, int crop, int f) {
        const int lo = GrssConfig::phase_center(f);
        const int hi = n - crop - (f - 1) + GrssConfig::phase_center(f);
        if (hi < lo)
            throw ConfigError("kv crop " + std::to_string(crop) +
                              " leaves no phase-safe origin on a detector axis of " +
                              std::to_string(n) + " pixels");
        return std::clamp(want, lo, hi);
    };
    const double zc_index = 0.5 * (r.secondary_box.lo[2] + r.secondary_box.hi[2]);
    const double zc_mm = cfg.phantom.origin_mm()[2] + zc_index * cfg.phantom.spacing_mm[2];
    const double iv = zc_mm * cfg.geometry.magnification() / cfg.geometry.dv_mm +
                      0.5 * (cfg.geometry.nv - 1);
    r.secondary_kv_origin[0] = clamp_origin((cfg.geometry.nu - cu) / 2, cfg.geometry.nu, cu, fu);
    r.secondary_kv_origin[1] =
        clamp_origin(int(std::lround(iv)) - cv / 2, cfg.geometry.nv, cv, fv);
    return r;
}

void write_regions(const RunRegions& r, const std::string& path) {
    nlohmann::json j;
    auto box = [](const BoxIndices& b) {
        nlohmann::json o;
        o["lo"] = b.lo;
        o["hi"] = b.hi;
        return o;
    };
    j["primary_box"] = box(r.primary_box);
    j["secondary_box"] = box(r.secondary_box);
    j["head_box_local"] = box(r.head_box_local);
    j["secondary_kv_origin"] = r.secondary_kv_origin;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write regions file " + path);
    out << j.dump(2) << "\n";
    if (!out.good()) throw IoError("write failed for regions file " + path);
}

RunRegions read_regions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read regions file " + path);
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        auto box = [](const nlohmann::json& o) {
            BoxIndices b;
            for (int a = 0; a < 3; ++a) {
                b.lo[a] = o.at("lo").at(a).get<int>();
                b.hi[a] = o.at("hi").at(a).get<int>();
            }
            return b;
        };
        RunRegions r;
        r.primary_box = box(j.at("primary_box"));
        r.secondary_box = box(j.at("secondary_box"));
        r.head_box_local = box(j.at("head_box_local"));
        r.secondary_kv_origin[0] = j.at("secondary_kv_origin").at(0).get<int>();
        r.secondary_kv_origin[1] = j.at("secondary_kv_origin").at(1).get<int>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed regions file " + path + ": " + e.what());
    }
}

// ---- stages ----

void stage_phantom(const RunConfig& cfg, bool force, std::ostream* log) {
    guarded("phantom", [&] {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        const std::string stem = p.abs(p.gct_rel());
        if (!force && marker_ok(p.marker("phantom"), hash) && stem_exists(stem) &&
            file_exists(stem + ".masks.json")) {
            logline(log, "phantom: cached");
            return;
        }
        logline(log, "phantom: generating " + std::to_string(cfg.phantom.dims[0]) + "x" +
                         std::to_string(cfg.phantom.dims[1]) + "x" +
                         std::to_string(cfg.phantom.dims[2]) + " volume (seed " +
                         std::to_string(cfg.phantom.seed) + ")");
        ensure_dir(p.phantom_dir());
        const PhantomResult res = generate_phantom(cfg.phantom);
        write_volume(res.ct, stem);
        write_masks(res.masks, stem);
        write_marker(p.marker("phantom"), hash);
    });
}

void stage_project(const RunConfig& cfg, bool force, std::ostream* log) {
    guarded("project", [&] {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        const std::string stem = p.abs(p.kv0_rel());
        if (!force && marker_ok(p.marker("project"), hash) && stem_exists(stem)) {
            logline(log, "project: cached");
            return;
        }
        require_stem(p.abs(p.gct_rel()), "generated CT");
        logline(log, "project: computing reference projections");
        ensure_dir(p.project_dir());
        const Volume3D gct = read_volume(p.abs(p.gct_rel()));
        KvImagePair kv = project_pair(gct, cfg.geometry);
        if (cfg.projection_noise_sigma > 0.0) {
            add_projection_noise(kv.ap, cfg.projection_noise_sigma, cfg.seed * 7 + 1);
            add_projection_noise(kv.lat, cfg.projection_noise_sigma, cfg.seed * 7 + 2);
        }
        write_kv_pair(kv, stem);
        write_marker(p.marker("project"), hash);
    });
}

void stage_augment(const RunConfig& cfg, bool force, std::ostream* log) {
    guarded("augment", [&] {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        if (!force && marker_ok(p.marker("augment"), hash) &&
            file_exists(p.abs(p.regions_rel())) && file_exists(p.abs(p.pairs_rel("primary"))) &&
            file_exists(p.abs(p.pairs_rel("secondary")))) {
            logline(log, "augment: cached");
            return;
        }
        require_stem(p.abs(p.gct_rel()), "generated CT");
        require_file(p.abs(p.gct_rel()) + ".masks.json", "structure masks");
        require_stem(p.abs(p.kv0_rel()), "reference projections");
        ensure_dir(p.augment_dir());
        ensure_dir(p.augment_dir() + "/primary");
        ensure_dir(p.augment_dir() + "/secondary");

        const Volume3D gct = read_volume(p.abs(p.gct_rel()));
        const StructureMaskSet masks = read_masks(p.abs(p.gct_rel()));
        const KvImagePair kv = read_kv_pair(p.abs(p.kv0_rel()));

        const RunRegions regions = derive_regions(cfg, masks);
        write_regions(regions, p.abs(p.regions_rel()));

        logline(log, "augment: expanding the training set (primary)");
        const auto primary = augment(gct, kv, cfg.grss_primary, regions.primary_box);
        write_training_pairs(primary, p.augment_dir() + "/primary");

        logline(log, "augment: expanding the training set (secondary)");
        const auto secondary =
            augment(gct, kv, resolved_secondary(cfg, regions), regions.secondary_box);
        write_training_pairs(secondary, p.augment_dir() + "/secondary");

        logline(log, "augment: " + std::to_string(primary.size()) + " primary pairs, " +
                         std::to_string(secondary.size()) + " secondary pairs");
        write_marker(p.marker("augment"), hash,
                     {{"primary_pairs", double(primary.size())},
                      {"secondary_pairs", double(secondary.size())}});
    });
}

namespace {

void train_one(const RunConfig& cfg, const std::string& tag, bool force, std::ostream* log) {
    const Paths p(cfg.workspace);
    const std::string hash = cfg.config_hash();
    const std::string marker = p.train_marker(tag);
    const std::string stem = p.abs(p.ckpt_rel(tag));
    if (!force && marker_ok(marker, hash) && file_exists(stem + ".json") &&
        file_exists(stem + ".bin")) {
        logline(log, "train " + tag + ": cached");
        return;
    }
    require_file(p.abs(p.pairs_rel(tag)), tag + " training pairs");
    ensure_dir(p.train_dir());

    const auto pairs = read_training_pairs(p.abs(p.pairs_rel(tag)));
    const ModelConfig& mc = tag == "primary" ? cfg.model_primary : cfg.model_secondary;
    const TrainConfig& tc = tag == "primary" ? cfg.train_primary : cfg.train_secondary;
    Net<float> net(mc);
    net.init_params(cfg.seed * 1000 + (tag == "primary" ? 1 : 2));

    logline(log, "train " + tag + ": " + std::to_string(pairs.size()) + " pairs, " +
                     std::to_string(tc.epochs) + " epochs, " +
                     std::to_string(net.param_count_allocated()) + " parameters");
    const TrainResult res = train(net, pairs, tc, stem, log);
    write_loss_curve(p.abs(p.loss_rel(tag)), res.curve);
    logline(log, "train " + tag + ": best epoch-mean loss " + std::to_string(res.best_loss) +
                     " at epoch " + std::to_string(res.best_epoch));
    write_marker(marker, hash,
                 {{"best_loss", res.best_loss}, {"best_epoch", double(res.best_epoch)}});
}

}  // namespace

void stage_train(const RunConfig& cfg, const std::string& which, bool force, std::ostream* log) {
    guarded("train", [&] {
        if (which != "primary" && which != "secondary" && which != "both")
            throw ConfigError("unknown training selector '" + which +
                              "' (expected primary, secondary or both)");
        if (which == "primary" || which == "both") train_one(cfg, "primary", force, log);
        if (which == "secondary" || which == "both") train_one(cfg, "secondary", force, log);
    });
}

void stage_synthesize(const RunConfig& cfg, bool force, std::ostream* log) {
    guarded("synthesize", [&] {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        if (!force && marker_ok(p.marker("synth"), hash) && stem_exists(p.abs(p.sgct_rel())) &&
            stem_exists(p.abs(p.kv_eval_rel())) &&
            stem_exists(p.abs(p.model_out_rel("primary"))) &&
            stem_exists(p.abs(p.model_out_rel("secondary")))) {
            logline(log, "synthesize: cached");
            return;
        }
        require_stem(p.abs(p.gct_rel()), "generated CT");
        require_file(p.abs(p.regions_rel()), "region file");
        for (const std::string tag : {"primary", "secondary"}) {
            require_file(p.abs(p.ckpt_rel(tag)) + ".json", tag + " checkpoint");
            require_file(p.abs(p.ckpt_rel(tag)) + ".bin", tag + " checkpoint");
        }
        ensure_dir(p.synth_dir());

        const Volume3D gct = read_volume(p.abs(p.gct_rel()));
        const RunRegions regions = read_regions(p.abs(p.regions_rel()));

        // Held-out acquisition: couch moved along S-I by the evaluation shift.
        logline(log, "synthesize: projecting the shifted evaluation pair (" +
                         std::to_string(cfg.eval_shift_mm) + " mm S-I)");
        const Volume3D sgct = shift_volume(gct, cfg.eval_shift_mm, Axis::SI);
        write_volume(sgct, p.abs(p.sgct_rel()));
        KvImagePair kv_eval = project_pair(sgct, cfg.geometry);
        if (cfg.projection_noise_sigma > 0.0) {
            add_projection_noise(kv_eval.ap, cfg.projection_noise_sigma, cfg.seed * 7 + 11);
            add_projection_noise(kv_eval.lat, cfg.projection_noise_sigma, cfg.seed * 7 + 12);
        }
        write_kv_pair(kv_eval, p.abs(p.kv_eval_rel()));

        const auto run_model = [&](const std::string& tag, const GrssConfig& g,
                                   const BoxIndices& box) {
            logline(log, "synthesize: running the " + tag + " model");
            Net<float> net = load_checkpoint<float>(p.abs(p.ckpt_rel(tag)));
            if (net.config().model_tag != tag)
                throw ConfigError("checkpoint at " + p.ckpt_rel(tag) + " carries tag '" +
                                  net.config().model_tag + "', expected '" + tag + "'");
            const TrainingPair input = make_model_input(kv_eval, g);
            const auto packed = pack_kv_input<float>(net.config(), input.kv_ap, input.kv_lat);
            const auto& out = net.forward(packed);
            const Volume3D vol =
                unpack_output(net.config(), out, output_meta(cfg, box, g.ct_downsample));
            write_volume(vol, p.abs(p.model_out_rel(tag)));
        };
        run_model("primary", cfg.grss_primary, regions.primary_box);
        run_model("secondary", resolved_secondary(cfg, regions), regions.secondary_box);
        write_marker(p.marker("synth"), hash);
    });
}

void stage_compose(const RunConfig& cfg, bool force, std::ostream* log) {
    guarded("compose", [&] {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        if (!force && marker_ok(p.marker("compose"), hash) && stem_exists(p.abs(p.ssct_rel())) &&
            stem_exists(p.abs(p.primary_only_rel()))) {
            logline(log, "compose: cached");
            return;
        }
        require_stem(p.abs(p.model_out_rel("primary")), "primary model output");
        require_stem(p.abs(p.model_out_rel("secondary")), "secondary model output");
        require_file(p.abs(p.regions_rel()), "region file");
        ensure_dir(p.compose_dir());

        const Volume3D primary_out = read_volume(p.abs(p.model_out_rel("primary")));
        const Volume3D secondary_out = read_volume(p.abs(p.model_out_rel("secondary")));
        const RunRegions regions = read_regions(p.abs(p.regions_rel()));

        logline(log, "compose: overlaying the head region (feather " +
                         std::to_string(cfg.compose_feather_voxels) + " voxels)");
        CompositionSpec spec;
        spec.head_box = regions.head_box_local;
        spec.feather_voxels = cfg.compose_feather_voxels;
        const Volume3D ssct = compose(primary_out, secondary_out, spec, cfg.primary_extent);
        write_volume(ssct, p.abs(p.ssct_rel()));

        // Primary-only baseline at native resolution, for the head-region
        // improvement diagnostic.
        const Volume3D primary_only =
            upsample_volume_trilinear(primary_out, cfg.grss_primary.ct_downsample);
        write_volume(primary_only, p.abs(p.primary_only_rel()));
        write_marker(p.marker("compose"), hash);
    });
}

MetricReport stage_evaluate(const RunConfig& cfg, bool force, std::ostream* log) {
    return guarded("evaluate", [&]() -> MetricReport {
        const Paths p(cfg.workspace);
        const std::string hash = cfg.config_hash();
        if (!force && marker_ok(p.marker("eval"), hash) && file_exists(p.abs(p.metrics_rel()))) {
            logline(log, "evaluate: cached");
            return read_metric_report_json(p.abs(p.metrics_rel()));
        }
        require_stem(p.abs(p.sgct_rel()), "shifted ground-truth CT");
        require_stem(p.abs(p.ssct_rel()), "synthetic CT");
        require_stem(p.abs(p.primary_only_rel()), "primary-only baseline");
        require_file(p.abs(p.gct_rel()) + ".masks.json", "structure masks");
        require_file(p.abs(p.regions_rel()), "region file");
        ensure_dir(p.eval_dir());

        const Volume3D sgct = read_volume(p.abs(p.sgct_rel()));
        const Volume3D ssct = read_volume(p.abs(p.ssct_rel()));
        const Volume3D primary_only = read_volume(p.abs(p.primary_only_rel()));
        const StructureMaskSet masks = read_masks(p.abs(p.gct_rel()));
        const RunRegions regions = read_regions(p.abs(p.regions_rel()));

        const Volume3D sgct_crop = crop_volume(sgct, regions.primary_box);
        sgct_crop.require_same_grid(ssct, "evaluate");

        // Anatomy masks in the evaluation frame (shifted with the couch).
        StructureMaskSet shifted;
        shifted.dims = sgct_crop.dims;
        for (const auto& name : structure_names())
            shifted.masks[name] =
                shifted_cropped_mask(masks.mask(name), sgct, cfg.eval_shift_mm,
                                     regions.primary_box);

        const auto& body = shifted.mask("BODY");
        if (std::count(body.begin(), body.end(), std::uint8_t(1)) == 0)
            throw NumericError("evaluation body mask is empty");

        MetricReport rep;
        logline(log, "evaluate: intensity metrics");
        rep.mae_hu = mae(sgct_crop, ssct, &body);
        rep.cdvh = cdvh(sgct_crop, ssct, &body);

        for (const auto& crit : cfg.gamma_criteria) {
            logline(log, "evaluate: gamma " + crit.label());
            const GammaBothWays g = gamma3d_both(sgct_crop, ssct, crit);
            auto& row = rep.gamma_pass_percent[crit.label()];
            row["ref_gct"] = g.ref_first.pass_percent;
            row["ref_sct"] = g.ref_second.pass_percent;
            row["mean"] = g.mean_percent;
        }

        // Dose domain: one analytic beam aimed at the (shifted) target center,
        // recomputed on both CTs; gamma on the fields, DVH indices on both.
        logline(log, "evaluate: dose surrogate and DVH");
        const BoxIndices ctv = mask_bbox(masks, "CTV");
        DoseFieldSpec dspec = cfg.dose;
        const auto org = cfg.phantom.origin_mm();
        for (int a = 0; a < 3; ++a)
            dspec.target_mm[a] =
                org[a] + 0.5 * (ctv.lo[a] + ctv.hi[a]) * cfg.phantom.spacing_mm[a];
        dspec.target_mm[2] += cfg.eval_shift_mm;
        const Volume3D dose_gct = synthetic_dose(sgct_crop, dspec);
        const Volume3D dose_sct = synthetic_dose(ssct, dspec);
        write_volume(dose_gct, p.abs(p.dose_rel("gct")));
        write_volume(dose_sct, p.abs(p.dose_rel("sct")));
        {
            const GammaBothWays g = gamma3d_both(dose_gct, dose_sct, cfg.dose_gamma);
            auto& row = rep.gamma_pass_percent["dose " + cfg.dose_gamma.label()];
            row["ref_gct"] = g.ref_first.pass_percent;
            row["ref_sct"] = g.ref_second.pass_percent;
            row["mean"] = g.mean_percent;
        }

        const DvhSpec dvh_spec;
        const auto dvh_gct = dvh_indices(dose_gct, shifted, dvh_spec);
        const auto dvh_sct = dvh_indices(dose_sct, shifted, dvh_spec);
        for (const auto& [structure, indices] : dvh_gct)
            for (const auto& [label, value] : indices) rep.dvh[structure + ":gct"][label] = value;
        for (const auto& [structure, indices] : dvh_sct)
            for (const auto& [label, value] : indices) {
                rep.dvh[structure + ":sct"][label] = value;
                const auto git = dvh_gct.find(structure);
                if (git != dvh_gct.end()) {
                    const auto vit = git->second.find(label);
                    if (vit != git->second.end())
                        rep.dvh[structure + ":diff"][label] = value - vit->second;
                }
            }

        logline(log, "evaluate: residual-shift search");
        const ShiftErrorResult sres = shift_error(ssct, sgct_crop);
        rep.shift_error_mm = sres.se_mm;
        rep.shift_delta_mm = sres.delta_mm;

        // Head-region diagnostic: does the overlay improve on the primary
        // model inside the head box?
        std::vector<std::uint8_t> head_mask(body.size(), 0);
        const BoxIndices& hb = regions.head_box_local;
        for (int z = hb.lo[2]; z <= hb.hi[2]; ++z)
            for (int y = hb.lo[1]; y <= hb.hi[1]; ++y)
                for (int x = hb.lo[0]; x <= hb.hi[0]; ++x) {
                    const auto i = std::size_t(sgct_crop.index(x, y, z));
                    head_mask[i] = body[i];
                }
        const double primary_head_mae = mae(sgct_crop, primary_only, &head_mask);
        const double composed_head_mae = mae(sgct_crop, ssct, &head_mask);
        const double improvement =
            primary_head_mae > 0.0 ? 100.0 * (1.0 - composed_head_mae / primary_head_mae) : 0.0;
        logline(log, "evaluate: MAE " + std::to_string(rep.mae_hu) + " HU, head MAE " +
                         std::to_string(composed_head_mae) + " HU (primary-only " +
                         std::to_string(primary_head_mae) + " HU)");

        write_metric_report_json(rep, p.abs(p.metrics_rel()));
        write_cdvh_csv(rep.cdvh, p.abs(p.cdvh_rel()));
        if (png_supported()) {
            const int zmid = (hb.lo[2] + hb.hi[2]) / 2;
            write_slice_triptych(sgct_crop, ssct, zmid, p.abs(p.slice_rel()));
        }
        write_marker(p.marker("eval"), hash,
                     {{"primary_head_mae_hu", primary_head_mae},
                      {"composed_head_mae_hu", composed_head_mae},
                      {"head_improvement_percent", improvement}});
        return rep;
    });
}

PipelineResult stage_report(const RunConfig& cfg, std::ostream* log) {
    return guarded("report", [&]() -> PipelineResult {
        const Paths p(cfg.workspace);
        require_file(p.abs(p.metrics_rel()), "metric report");

        RunReport rep;
        rep.config_hash = cfg.config_hash();
        rep.config_json = cfg.canonical_json();
        rep.metrics = read_metric_report_json(p.abs(p.metrics_rel()));

        const std::vector<std::pair<std::string, std::string>> candidates = {
            {"generated_ct", p.gct_rel() + ".json"},
            {"structure_masks", p.gct_rel() + ".masks.json"},
            {"kv_reference", p.kv0_rel() + ".json"},
            {"regions", p.regions_rel()},
            {"pairs_primary", p.pairs_rel("primary")},
            {"pairs_secondary", p.pairs_rel("secondary")},
            {"checkpoint_primary", p.ckpt_rel("primary") + ".json"},
            {"checkpoint_secondary", p.ckpt_rel("secondary") + ".json"},
            {"loss_curve_primary", p.loss_rel("primary")},
            {"loss_curve_secondary", p.loss_rel("secondary")},
            {"shifted_ct", p.sgct_rel() + ".json"},
            {"kv_eval", p.kv_eval_rel() + ".json"},
            {"primary_output", p.model_out_rel("primary") + ".json"},
            {"secondary_output", p.model_out_rel("secondary") + ".json"},
            {"synthetic_ct", p.ssct_rel() + ".json"},
            {"primary_upsampled", p.primary_only_rel() + ".json"},
            {"metrics", p.metrics_rel()},
            {"cdvh_csv", p.cdvh_rel()},
            {"dose_reference", p.dose_rel("gct") + ".json"},
            {"dose_synthetic", p.dose_rel("sct") + ".json"},
            {"slice_png", p.slice_rel()},
        };
        for (const auto& [name, rel] : candidates)
            if (file_exists(p.abs(rel))) rep.artifacts[name] = rel;

        if (file_exists(p.marker("augment")))
            for (const auto& [k, v] : read_marker_extras(p.marker("augment"))) rep.extras[k] = v;
        for (const std::string tag : {"primary", "secondary"})
            if (file_exists(p.train_marker(tag)))
                for (const auto& [k, v] : read_marker_extras(p.train_marker(tag)))
                    rep.extras["train_" + tag + "_" + k] = v;
        if (file_exists(p.marker("eval")))
            for (const auto& [k, v] : read_marker_extras(p.marker("eval"))) rep.extras[k] = v;

        const std::string report_path = p.abs(p.report_rel());
        write_run_report(rep, report_path);
        logline(log, "report: " + report_path);

        PipelineResult result;
        result.metrics = rep.metrics;
        result.artifacts = rep.artifacts;
        result.extras = rep.extras;
        result.report_path = report_path;
        return result;
    });
}

PipelineResult run_pipeline(const RunConfig& cfg, bool force, std::ostream* log) {
    cfg.validate();
    ensure_dir(cfg.workspace);
    stage_phantom(cfg, force, log);
    stage_project(cfg, force, log);
    stage_augment(cfg, force, log);
    stage_train(cfg, "both", force, log);
    stage_synthesize(cfg, force, log);
    stage_compose(cfg, force, log);
    stage_evaluate(cfg, force, log);
    return stage_report(cfg, log);
}

}  // namespace kv2ct
