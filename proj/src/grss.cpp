#include "kv2ct/grss.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace kv2ct {

namespace fs = std::filesystem;
using nlohmann::json;

void GrssConfig::validate(const GeometrySpec& geom) const {
    geom.validate();
    if (!(shift_step_mm > 0.0)) throw ConfigError("grss: shift_step_mm must be positive");
    if (shift_range_mm < shift_step_mm)
        throw ConfigError("grss: shift_range_mm must be at least shift_step_mm");
    if (std::abs(kv_shift_factor - geom.magnification()) > 1e-9)
        throw ConfigError("grss: kv_shift_factor " + std::to_string(kv_shift_factor) +
                          " does not match geometry sdd/sad " +
                          std::to_string(geom.magnification()));
    for (int a = 0; a < 3; ++a)
        if (ct_downsample[a] <= 0)
            throw ConfigError("grss: non-positive ct_downsample along " + axis_name(Axis(a)));
    if (kv_downsample[0] <= 0 || kv_downsample[1] <= 0)
        throw ConfigError("grss: non-positive kv_downsample");
    const int su = kv_crop_size[0] > 0 ? kv_crop_size[0] : geom.nu;
    const int sv = kv_crop_size[1] > 0 ? kv_crop_size[1] : geom.nv;
    if (su % kv_downsample[0] != 0)
        throw ConfigError("grss: kv crop width " + std::to_string(su) +
                          " not divisible by kv_downsample " + std::to_string(kv_downsample[0]) +
                          " along u");
    if (sv % kv_downsample[1] != 0)
        throw ConfigError("grss: kv crop height " + std::to_string(sv) +
                          " not divisible by kv_downsample " + std::to_string(kv_downsample[1]) +
                          " along v");
    const int n_phase_u = phase_enumeration ? kv_downsample[0] : 1;
    const int n_phase_v = phase_enumeration ? kv_downsample[1] : 1;
    const int cu = phase_center(kv_downsample[0]), cv = phase_center(kv_downsample[1]);
    const int u_lo = kv_crop_origin[0] - (phase_enumeration ? cu : 0);
    const int v_lo = kv_crop_origin[1] - (phase_enumeration ? cv : 0);
    if (u_lo < 0 || v_lo < 0 || u_lo + (n_phase_u - 1) + su > geom.nu ||
        v_lo + (n_phase_v - 1) + sv > geom.nv)
        throw ConfigError("grss: kv crop plus phase offsets exceed the detector");
    if (model_tag != "primary" && model_tag != "secondary")
        throw ConfigError("grss: model_tag must be primary or secondary");
}

std::vector<double> GrssConfig::shift_schedule() const {
    const double n_real = shift_range_mm / shift_step_mm;
    const long long n = std::llround(n_real);
    if (std::abs(n_real - double(n)) > 1e-6)
        throw ConfigError("grss: shift_range_mm must be an integer multiple of shift_step_mm");
    std::vector<double> out;
    out.reserve(std::size_t(2 * n + 1));
    for (long long i = -n; i <= n; ++i) out.push_back(double(i) * shift_step_mm);
    return out;
}

namespace {

void check_region(const Volume3D& ct, const GrssConfig& cfg, const BoxIndices& region) {
    if (!ct.full_box().contains(region))
        throw ConfigError("grss: ct crop region exceeds the volume");
    for (int a = 0; a < 3; ++a)
        if (region.extent(a) % cfg.ct_downsample[a] != 0)
            throw ConfigError("grss: ct crop extent " + std::to_string(region.extent(a)) +
                              " not divisible by ct_downsample " +
                              std::to_string(cfg.ct_downsample[a]) + " along " +
                              axis_name(Axis(a)));
}

}  // namespace

std::vector<TrainingPair> augment_one_shift(const Volume3D& ct, const KvImagePair& kv,
                                            const GrssConfig& cfg, const BoxIndices& region,
                                            double shift_mm) {
    cfg.validate(kv.geom);
    check_region(ct, cfg, region);
    const int su = cfg.kv_crop_size[0] > 0 ? cfg.kv_crop_size[0] : kv.geom.nu;
    const int sv = cfg.kv_crop_size[1] > 0 ? cfg.kv_crop_size[1] : kv.geom.nv;

    const Volume3D ct_shift = shift_volume(ct, shift_mm, Axis::SI);
    const Volume3D ct_ds =
        downsample_volume_blockmean(crop_volume(ct_shift, region), cfg.ct_downsample);
    const double dv_mm = cfg.kv_shift_factor * shift_mm;
    const Image2D ap_shift = translate_image(kv.ap, 0.0, dv_mm);
    const Image2D lat_shift = translate_image(kv.lat, 0.0, dv_mm);

    const int fu = cfg.kv_downsample[0], fv = cfg.kv_downsample[1];
    const int cu = GrssConfig::phase_center(fu), cv = GrssConfig::phase_center(fv);
    std::vector<TrainingPair> out;
    const int npu = cfg.phase_enumeration ? fu : 1;
    const int npv = cfg.phase_enumeration ? fv : 1;
    out.reserve(std::size_t(npu) * npv);
    for (int pu = 0; pu < npu; ++pu)
        for (int pv = 0; pv < npv; ++pv) {
            const int u0 = cfg.kv_crop_origin[0] + (cfg.phase_enumeration ? pu - cu : 0);
            const int v0 = cfg.kv_crop_origin[1] + (cfg.phase_enumeration ? pv - cv : 0);
            TrainingPair pair;
            pair.kv_ap = downsample_image_blockmean(crop_image(ap_shift, u0, v0, su, sv), fu, fv);
            pair.kv_lat = downsample_image_blockmean(crop_image(lat_shift, u0, v0, su, sv), fu, fv);
            pair.ct = ct_ds;
            pair.shift_mm = shift_mm;
            pair.phase = {cfg.phase_enumeration ? pu : cu, cfg.phase_enumeration ? pv : cv};
            pair.model_tag = cfg.model_tag;
            out.push_back(std::move(pair));
        }
    return out;
}

std::vector<TrainingPair> augment(const Volume3D& ct, const KvImagePair& kv,
                                  const GrssConfig& cfg, const BoxIndices& region) {
    std::vector<TrainingPair> out;
    for (double delta : cfg.shift_schedule()) {
        auto batch = augment_one_shift(ct, kv, cfg, region, delta);
        for (auto& p : batch) out.push_back(std::move(p));
    }
    return out;
}

TrainingPair make_model_input(const KvImagePair& kv, const GrssConfig& cfg) {
    cfg.validate(kv.geom);
    const int su = cfg.kv_crop_size[0] > 0 ? cfg.kv_crop_size[0] : kv.geom.nu;
    const int sv = cfg.kv_crop_size[1] > 0 ? cfg.kv_crop_size[1] : kv.geom.nv;
    const int fu = cfg.kv_downsample[0], fv = cfg.kv_downsample[1];
    TrainingPair pair;
    pair.kv_ap = downsample_image_blockmean(
        crop_image(kv.ap, cfg.kv_crop_origin[0], cfg.kv_crop_origin[1], su, sv), fu, fv);
    pair.kv_lat = downsample_image_blockmean(
        crop_image(kv.lat, cfg.kv_crop_origin[0], cfg.kv_crop_origin[1], su, sv), fu, fv);
    pair.phase = {GrssConfig::phase_center(fu), GrssConfig::phase_center(fv)};
    pair.model_tag = cfg.model_tag;
    return pair;
}

std::string write_training_pairs(const std::vector<TrainingPair>& pairs, const std::string& dir,
                                 const std::string& manifest_name) {
    if (pairs.empty()) throw ConfigError("write_training_pairs: empty pair list");
    fs::create_directories(dir);
    json manifest;
    manifest["pairs"] = json::array();
    char name[64];
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        std::snprintf(name, sizeof(name), "%s_%04zu", p.model_tag.c_str(), i);
        const std::string stem = std::string(name);
        KvImagePair kvp;
        kvp.ap = p.kv_ap;
        kvp.lat = p.kv_lat;
        kvp.geom.nu = p.kv_ap.nu;
        kvp.geom.nv = p.kv_ap.nv;
        kvp.geom.du_mm = p.kv_ap.du_mm;
        kvp.geom.dv_mm = p.kv_ap.dv_mm;
        write_kv_pair(kvp, dir + "/" + stem + ".kv");
        write_volume(p.ct, dir + "/" + stem + ".ct");
        json entry;
        entry["kv"] = stem + ".kv";
        entry["ct"] = stem + ".ct";
        entry["shift_mm"] = p.shift_mm;
        entry["phase"] = p.phase;
        entry["model_tag"] = p.model_tag;
        manifest["pairs"].push_back(entry);
    }
    const std::string path = dir + "/" + manifest_name;
    std::ofstream js(path);
    if (!js) throw IoError("write_training_pairs: cannot open " + path);
    js << manifest.dump(2) << "\n";
    if (!js) throw IoError("write_training_pairs: failed writing " + path);
    return path;
}

std::vector<TrainingPair> read_training_pairs(const std::string& manifest_path) {
    std::ifstream js(manifest_path);
    if (!js) throw IoError("read_training_pairs: cannot open " + manifest_path);
    json manifest;
    try {
        js >> manifest;
    } catch (const json::exception& e) {
        throw IoError("read_training_pairs: bad JSON in " + manifest_path + ": " + e.what());
    }
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<TrainingPair> out;
    try {
        for (const auto& entry : manifest.at("pairs")) {
            TrainingPair p;
            const KvImagePair kvp = read_kv_pair((base / entry.at("kv").get<std::string>()).string());
            p.kv_ap = kvp.ap;
            p.kv_lat = kvp.lat;
            p.ct = read_volume((base / entry.at("ct").get<std::string>()).string());
            p.shift_mm = entry.at("shift_mm").get<double>();
            entry.at("phase").get_to(p.phase);
            p.model_tag = entry.at("model_tag").get<std::string>();
            out.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw IoError("read_training_pairs: missing field in " + manifest_path + ": " + e.what());
    }
    if (out.empty()) throw IoError("read_training_pairs: manifest has no pairs");
    return out;
}

}  // namespace kv2ct
