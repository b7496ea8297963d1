#include "kv2ct/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace kv2ct {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Remove a trailing comment, honouring double-quoted strings.
std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

std::string unquote(const std::string& tok) {
    if (tok.size() >= 2 && tok.front() == '"' && tok.back() == '"')
        return tok.substr(1, tok.size() - 2);
    return tok;
}

}  // namespace

void ConfigTree::set(const std::string& key, std::vector<std::string> tokens) {
    if (values_.count(key)) throw ConfigError("config key '" + key + "' appears twice");
    values_[key] = std::move(tokens);
}

const std::vector<std::string>* ConfigTree::find(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
}

bool ConfigTree::has(const std::string& key) const {
    return find(key) != nullptr;
}

std::string ConfigTree::get_string(const std::string& key, const std::string& fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (v->size() != 1) throw ConfigError("config key '" + key + "': expected a single value");
    return (*v)[0];
}

double ConfigTree::get_double(const std::string& key, double fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (v->size() != 1) throw ConfigError("config key '" + key + "': expected a single number");
    try {
        std::size_t pos = 0;
        double d = std::stod((*v)[0], &pos);
        if (pos != (*v)[0].size()) throw std::invalid_argument("trailing");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + (*v)[0] + "' as number");
    }
}

std::int64_t ConfigTree::get_int(const std::string& key, std::int64_t fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (v->size() != 1) throw ConfigError("config key '" + key + "': expected a single integer");
    try {
        std::size_t pos = 0;
        long long i = std::stoll((*v)[0], &pos);
        if (pos != (*v)[0].size()) throw std::invalid_argument("trailing");
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + (*v)[0] + "' as integer");
    }
}

bool ConfigTree::get_bool(const std::string& key, bool fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (v->size() == 1 && (*v)[0] == "true") return true;
    if (v->size() == 1 && (*v)[0] == "false") return false;
    throw ConfigError("config key '" + key + "': expected true or false");
}

std::vector<double> ConfigTree::get_array(const std::string& key, std::size_t n) const {
    const auto* v = find(key);
    if (!v) throw ConfigError("config key '" + key + "': missing required array");
    if (v->size() != n)
        throw ConfigError("config key '" + key + "': expected " + std::to_string(n) +
                          " elements, got " + std::to_string(v->size()));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        try {
            std::size_t pos = 0;
            out[i] = std::stod((*v)[i], &pos);
            if (pos != (*v)[i].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': element '" + (*v)[i] +
                              "' is not a number");
        }
    }
    return out;
}

std::vector<std::string> ConfigTree::get_string_array(const std::string& key) const {
    const auto* v = find(key);
    if (!v) return {};
    return *v;
}

std::vector<std::string> ConfigTree::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : values_)
        if (!consumed_.count(k)) out.push_back(k);
    return out;
}

ConfigTree parse_config_text(const std::string& text, const std::string& origin) {
    ConfigTree tree;
    std::istringstream in(text);
    std::string line, prefix;
    int ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        const std::string s = trim(strip_comment(line));
        if (s.empty()) continue;
        const std::string where = origin + ":" + std::to_string(ln);
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(where + ": unterminated section header");
            prefix = trim(s.substr(1, s.size() - 2));
            if (prefix.empty()) throw ConfigError(where + ": empty section name");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (value.empty()) throw ConfigError(where + ": empty value for '" + key + "'");
        const std::string full = prefix.empty() ? key : prefix + "." + key;
        std::vector<std::string> tokens;
        if (value.front() == '[') {
            if (value.back() != ']') throw ConfigError(where + ": unterminated array");
            std::string inner = value.substr(1, value.size() - 2);
            std::string cur;
            bool quoted = false;
            for (char c : inner) {
                if (c == '"') quoted = !quoted;
                if (c == ',' && !quoted) {
                    tokens.push_back(unquote(trim(cur)));
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            if (!trim(cur).empty()) tokens.push_back(unquote(trim(cur)));
            if (tokens.empty()) throw ConfigError(where + ": empty array for '" + key + "'");
        } else {
            tokens.push_back(unquote(value));
        }
        tree.set(full, std::move(tokens));
    }
    return tree;
}

ConfigTree parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

// ---- RunConfig ----

namespace {

std::array<int, 3> to_int3(const std::vector<double>& v, const std::string& key) {
    std::array<int, 3> out{};
    for (int i = 0; i < 3; ++i) {
        out[i] = int(v[i]);
        if (double(out[i]) != v[i])
            throw ConfigError("config key '" + key + "': expected integers");
    }
    return out;
}

std::array<int, 2> to_int2(const std::vector<double>& v, const std::string& key) {
    std::array<int, 2> out{};
    for (int i = 0; i < 2; ++i) {
        out[i] = int(v[i]);
        if (double(out[i]) != v[i])
            throw ConfigError("config key '" + key + "': expected integers");
    }
    return out;
}

std::vector<int> to_int_list(const ConfigTree& t, const std::string& key,
                             const std::vector<int>& fallback) {
    if (!t.has(key)) return fallback;
    auto toks = t.get_string_array(key);
    std::vector<int> out;
    for (const auto& s : toks) {
        try {
            std::size_t pos = 0;
            out.push_back(int(std::stoll(s, &pos)));
            if (pos != s.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': element '" + s + "' is not an integer");
        }
    }
    return out;
}

GammaCriteria parse_criteria(const std::string& s, const std::string& key) {
    GammaCriteria c;
    double dd = 0, dta = 0, thr = 10.0;
    const int n = std::sscanf(s.c_str(), "%lf,%lf,%lf", &dd, &dta, &thr);
    if (n < 2) throw ConfigError("config key '" + key + "': expected \"dd,dta[,threshold]\", got '" + s + "'");
    c.dd_percent = dd;
    c.dta_mm = dta;
    c.low_threshold_percent = thr;
    c.validate();
    return c;
}

void apply_phantom(const ConfigTree& t, PhantomSpec& p, std::uint64_t run_seed) {
    const std::string k = "phantom.";
    p.seed = std::uint64_t(t.get_int(k + "seed", std::int64_t(run_seed)));
    if (t.has(k + "dims")) p.dims = to_int3(t.get_array(k + "dims", 3), k + "dims");
    if (t.has(k + "spacing_mm")) {
        auto v = t.get_array(k + "spacing_mm", 3);
        p.spacing_mm = {v[0], v[1], v[2]};
    }
    p.with_body = t.get_bool(k + "with_body", p.with_body);
    p.with_skull = t.get_bool(k + "with_skull", p.with_skull);
    p.with_spine = t.get_bool(k + "with_spine", p.with_spine);
    p.with_mandible = t.get_bool(k + "with_mandible", p.with_mandible);
    p.with_brainstem = t.get_bool(k + "with_brainstem", p.with_brainstem);
    p.with_cavities = t.get_bool(k + "with_cavities", p.with_cavities);
    p.with_helmet = t.get_bool(k + "with_helmet", p.with_helmet);
    p.with_tumor = t.get_bool(k + "with_tumor", p.with_tumor);
    if (t.has(k + "head_center_mm")) {
        auto v = t.get_array(k + "head_center_mm", 3);
        p.head_center_mm = {v[0], v[1], v[2]};
    }
    if (t.has(k + "head_radii_mm")) {
        auto v = t.get_array(k + "head_radii_mm", 3);
        p.head_radii_mm = {v[0], v[1], v[2]};
    }
    if (t.has(k + "tumor_center_mm")) {
        auto v = t.get_array(k + "tumor_center_mm", 3);
        p.tumor_center_mm = {v[0], v[1], v[2]};
    }
    if (t.has(k + "tumor_radii_mm")) {
        auto v = t.get_array(k + "tumor_radii_mm", 3);
        p.tumor_radii_mm = {v[0], v[1], v[2]};
    }
    p.tumor_hu = t.get_double(k + "tumor_hu", p.tumor_hu);
    p.helmet_thickness_mm = t.get_double(k + "helmet_thickness_mm", p.helmet_thickness_mm);
    p.jitter_voxels = t.get_double(k + "jitter_voxels", p.jitter_voxels);
}

void apply_geometry(const ConfigTree& t, GeometrySpec& g) {
    const std::string k = "geometry.";
    g.sad_mm = t.get_double(k + "sad_mm", g.sad_mm);
    g.sdd_mm = t.get_double(k + "sdd_mm", g.sdd_mm);
    g.nu = int(t.get_int(k + "nu", g.nu));
    g.nv = int(t.get_int(k + "nv", g.nv));
    g.du_mm = t.get_double(k + "du_mm", g.du_mm);
    g.dv_mm = t.get_double(k + "dv_mm", g.dv_mm);
    g.mu_water_per_mm = t.get_double(k + "mu_water_per_mm", g.mu_water_per_mm);
}

void apply_grss(const ConfigTree& t, const std::string& k, GrssConfig& g) {
    g.shift_range_mm = t.get_double(k + "shift_range_mm", g.shift_range_mm);
    g.shift_step_mm = t.get_double(k + "shift_step_mm", g.shift_step_mm);
    g.kv_shift_factor = t.get_double(k + "kv_shift_factor", g.kv_shift_factor);
    if (t.has(k + "ct_downsample"))
        g.ct_downsample = to_int3(t.get_array(k + "ct_downsample", 3), k + "ct_downsample");
    if (t.has(k + "kv_downsample"))
        g.kv_downsample = to_int2(t.get_array(k + "kv_downsample", 2), k + "kv_downsample");
    if (t.has(k + "kv_crop_origin"))
        g.kv_crop_origin = to_int2(t.get_array(k + "kv_crop_origin", 2), k + "kv_crop_origin");
    if (t.has(k + "kv_crop_size"))
        g.kv_crop_size = to_int2(t.get_array(k + "kv_crop_size", 2), k + "kv_crop_size");
    g.phase_enumeration = t.get_bool(k + "phase_enumeration", g.phase_enumeration);
}

void apply_model(const ConfigTree& t, const std::string& k, ModelConfig& m) {
    if (t.has(k + "input_hw")) m.input_hw = to_int2(t.get_array(k + "input_hw", 2), k + "input_hw");
    m.in_channels = int(t.get_int(k + "in_channels", m.in_channels));
    m.patch_size = int(t.get_int(k + "patch_size", m.patch_size));
    m.embed_dim = int(t.get_int(k + "embed_dim", m.embed_dim));
    m.encoder_depths = to_int_list(t, k + "encoder_depths", m.encoder_depths);
    m.decoder_depths = to_int_list(t, k + "decoder_depths", m.decoder_depths);
    m.encoder_heads = to_int_list(t, k + "encoder_heads", m.encoder_heads);
    m.decoder_heads = to_int_list(t, k + "decoder_heads", m.decoder_heads);
    m.window_size = int(t.get_int(k + "window_size", m.window_size));
    m.mlp_ratio = t.get_double(k + "mlp_ratio", m.mlp_ratio);
    m.out_depth = int(t.get_int(k + "out_depth", m.out_depth));
    m.out_patch = int(t.get_int(k + "out_patch", m.out_patch));
    m.use_pos_embed = t.get_bool(k + "use_pos_embed", m.use_pos_embed);
    m.hu_center = t.get_double(k + "hu_center", m.hu_center);
    m.hu_scale = t.get_double(k + "hu_scale", m.hu_scale);
    m.kv_center = t.get_double(k + "kv_center", m.kv_center);
    m.kv_scale = t.get_double(k + "kv_scale", m.kv_scale);
}

void apply_train(const ConfigTree& t, const std::string& k, TrainConfig& c) {
    c.epochs = int(t.get_int(k + "epochs", c.epochs));
    c.batch_size = int(t.get_int(k + "batch_size", c.batch_size));
    c.lr_peak = t.get_double(k + "lr_peak", c.lr_peak);
    c.lr_init = t.get_double(k + "lr_init", c.lr_init);
    c.warmup_epochs = int(t.get_int(k + "warmup_epochs", c.warmup_epochs));
    c.beta1 = t.get_double(k + "beta1", c.beta1);
    c.beta2 = t.get_double(k + "beta2", c.beta2);
    c.weight_decay = t.get_double(k + "weight_decay", c.weight_decay);
    c.smooth_l1_beta = t.get_double(k + "smooth_l1_beta", c.smooth_l1_beta);
    c.seed = std::uint64_t(t.get_int(k + "seed", std::int64_t(c.seed)));
}

}  // namespace

RunConfig default_desk_config() {
    RunConfig cfg;
    cfg.workspace = "workspace";
    cfg.seed = 1;

    cfg.phantom = PhantomSpec{};  // 64x64x48 @ 3 mm
    cfg.geometry = GeometrySpec{};

    cfg.grss_primary.shift_range_mm = 3.0;
    cfg.grss_primary.shift_step_mm = 1.0;
    cfg.grss_primary.ct_downsample = {1, 1, 1};
    cfg.grss_primary.kv_downsample = {6, 6};
    cfg.grss_primary.kv_crop_origin = {24, 24};
    cfg.grss_primary.kv_crop_size = {240, 240};
    cfg.grss_primary.model_tag = "primary";

    cfg.grss_secondary.shift_range_mm = 3.0;
    cfg.grss_secondary.shift_step_mm = 1.0;
    cfg.grss_secondary.ct_downsample = {1, 1, 1};
    cfg.grss_secondary.kv_downsample = {2, 2};
    cfg.grss_secondary.kv_crop_origin = {48, 48};  // recentred on the head at run time
    cfg.grss_secondary.kv_crop_size = {192, 192};
    cfg.grss_secondary.model_tag = "secondary";

    cfg.model_primary = ModelConfig{};  // 40x40 input
    cfg.model_primary.out_depth = 64;   // native-resolution 64x40x40 output
    cfg.model_primary.out_patch = 2;
    cfg.model_primary.model_tag = "primary";

    cfg.model_secondary = ModelConfig{};
    cfg.model_secondary.input_hw = {96, 96};
    cfg.model_secondary.patch_size = 8;
    cfg.model_secondary.window_size = 3;
    cfg.model_secondary.out_depth = 32;  // native-resolution 32x24x24 output
    cfg.model_secondary.out_patch = 2;
    cfg.model_secondary.model_tag = "secondary";

    cfg.train_primary.epochs = 30;
    cfg.train_primary.warmup_epochs = 3;
    cfg.train_primary.batch_size = 4;
    cfg.train_primary.lr_peak = 2e-3;
    cfg.train_primary.weight_decay = 0.001;
    cfg.train_primary.seed = 11;

    cfg.train_secondary = cfg.train_primary;
    cfg.train_secondary.seed = 12;

    cfg.primary_extent = {64, 40, 40};
    cfg.secondary_extent = {32, 24, 24};
    cfg.compose_feather_voxels = 2;
    cfg.eval_shift_mm = 2.0;
    cfg.projection_noise_sigma = 0.0;
    cfg.dose.prescription_gy = 60.0;
    cfg.dose.lateral_sigma_mm = 18.0;
    return cfg;
}

void RunConfig::validate() const {
    phantom.validate();
    geometry.validate();
    model_primary.validate();
    model_secondary.validate();
    train_primary.validate();
    train_secondary.validate();
    grss_primary.validate(geometry);
    grss_secondary.validate(geometry);
    if (grss_primary.model_tag != "primary" || model_primary.model_tag != "primary")
        throw ConfigError("run config: primary presets must carry tag 'primary'");
    if (grss_secondary.model_tag != "secondary" || model_secondary.model_tag != "secondary")
        throw ConfigError("run config: secondary presets must carry tag 'secondary'");

    auto check_kv = [&](const GrssConfig& g, const ModelConfig& m, const std::string& who) {
        const int cu = g.kv_crop_size[0] > 0 ? g.kv_crop_size[0] : geometry.nu;
        const int cv = g.kv_crop_size[1] > 0 ? g.kv_crop_size[1] : geometry.nv;
        if (cu / g.kv_downsample[0] != m.input_hw[1] || cv / g.kv_downsample[1] != m.input_hw[0])
            throw ConfigError("run config: " + who + " kV crop " + std::to_string(cu) + "x" +
                              std::to_string(cv) + " / downsample does not produce model input " +
                              std::to_string(m.input_hw[1]) + "x" + std::to_string(m.input_hw[0]));
    };
    check_kv(grss_primary, model_primary, "primary");
    check_kv(grss_secondary, model_secondary, "secondary");

    auto check_region = [&](const std::array<int, 3>& ext, const GrssConfig& g,
                            const ModelConfig& m, const std::string& who) {
        const auto out = m.output_dims();
        for (int a = 0; a < 3; ++a) {
            if (ext[a] <= 0 || ext[a] > phantom.dims[a])
                throw ConfigError("run config: " + who + " extent axis " + std::to_string(a) +
                                  " outside the phantom volume");
            if (ext[a] % g.ct_downsample[a] != 0)
                throw ConfigError("run config: " + who + " extent axis " + std::to_string(a) +
                                  " not divisible by ct_downsample");
            if (ext[a] / g.ct_downsample[a] != out[a])
                throw ConfigError("run config: " + who + " extent axis " + std::to_string(a) +
                                  " / downsample = " + std::to_string(ext[a] / g.ct_downsample[a]) +
                                  " but the model emits " + std::to_string(out[a]));
        }
    };
    check_region(primary_extent, grss_primary, model_primary, "primary");
    check_region(secondary_extent, grss_secondary, model_secondary, "secondary");
    for (int a = 0; a < 3; ++a)
        if (secondary_extent[a] > primary_extent[a])
            throw ConfigError("run config: secondary extent exceeds primary extent on axis " +
                              std::to_string(a));

    if (compose_feather_voxels < 0)
        throw ConfigError("run config: compose feather must be >= 0");
    const int min_ext = std::min({secondary_extent[0], secondary_extent[1], secondary_extent[2]});
    if (2 * compose_feather_voxels >= min_ext)
        throw ConfigError("run config: compose feather too wide for the secondary region");

    if (gamma_criteria.empty()) throw ConfigError("run config: gamma criteria list is empty");
    for (const auto& c : gamma_criteria) c.validate();
    dose_gamma.validate();
    dose.validate();
    if (!std::isfinite(eval_shift_mm) ||
        std::abs(eval_shift_mm) > 0.25 * phantom.dims[2] * phantom.spacing_mm[2])
        throw ConfigError("run config: eval shift is implausibly large");
    if (projection_noise_sigma < 0.0)
        throw ConfigError("run config: projection noise sigma must be >= 0");
    if (workspace.empty()) throw ConfigError("run config: workspace path is empty");
}

std::string RunConfig::canonical_json() const {
    using nlohmann::json;
    json j;
    // The workspace path is deliberately excluded: it is a storage location,
    // not an experiment parameter, so identical experiments in different
    // directories hash (and report) identically.
    j["seed"] = seed;

    json& p = j["phantom"];
    p["seed"] = phantom.seed;
    p["dims"] = phantom.dims;
    p["spacing_mm"] = phantom.spacing_mm;
    p["with_body"] = phantom.with_body;
    p["with_skull"] = phantom.with_skull;
    p["with_spine"] = phantom.with_spine;
    p["with_mandible"] = phantom.with_mandible;
    p["with_brainstem"] = phantom.with_brainstem;
    p["with_cavities"] = phantom.with_cavities;
    p["with_helmet"] = phantom.with_helmet;
    p["with_tumor"] = phantom.with_tumor;
    p["head_center_mm"] = phantom.head_center_mm;
    p["head_radii_mm"] = phantom.head_radii_mm;
    p["tumor_center_mm"] = phantom.tumor_center_mm;
    p["tumor_radii_mm"] = phantom.tumor_radii_mm;
    p["tumor_hu"] = phantom.tumor_hu;
    p["helmet_thickness_mm"] = phantom.helmet_thickness_mm;
    p["jitter_voxels"] = phantom.jitter_voxels;

    json& g = j["geometry"];
    g["sad_mm"] = geometry.sad_mm;
    g["sdd_mm"] = geometry.sdd_mm;
    g["nu"] = geometry.nu;
    g["nv"] = geometry.nv;
    g["du_mm"] = geometry.du_mm;
    g["dv_mm"] = geometry.dv_mm;
    g["mu_water_per_mm"] = geometry.mu_water_per_mm;

    auto grss_json = [](const GrssConfig& c) {
        json o;
        o["shift_range_mm"] = c.shift_range_mm;
        o["shift_step_mm"] = c.shift_step_mm;
        o["kv_shift_factor"] = c.kv_shift_factor;
        o["ct_downsample"] = c.ct_downsample;
        o["kv_downsample"] = c.kv_downsample;
        o["kv_crop_origin"] = c.kv_crop_origin;
        o["kv_crop_size"] = c.kv_crop_size;
        o["phase_enumeration"] = c.phase_enumeration;
        o["model_tag"] = c.model_tag;
        return o;
    };
    j["augment"]["primary"] = grss_json(grss_primary);
    j["augment"]["secondary"] = grss_json(grss_secondary);

    auto model_json = [](const ModelConfig& m) {
        json o;
        o["input_hw"] = m.input_hw;
        o["in_channels"] = m.in_channels;
        o["patch_size"] = m.patch_size;
        o["embed_dim"] = m.embed_dim;
        o["encoder_depths"] = m.encoder_depths;
        o["decoder_depths"] = m.decoder_depths;
        o["encoder_heads"] = m.encoder_heads;
        o["decoder_heads"] = m.decoder_heads;
        o["window_size"] = m.window_size;
        o["mlp_ratio"] = m.mlp_ratio;
        o["out_depth"] = m.out_depth;
        o["out_patch"] = m.out_patch;
        o["use_pos_embed"] = m.use_pos_embed;
        o["model_tag"] = m.model_tag;
        o["hu_center"] = m.hu_center;
        o["hu_scale"] = m.hu_scale;
        o["kv_center"] = m.kv_center;
        o["kv_scale"] = m.kv_scale;
        return o;
    };
    j["model"]["primary"] = model_json(model_primary);
    j["model"]["secondary"] = model_json(model_secondary);

    auto train_json = [](const TrainConfig& c) {
        json o;
        o["epochs"] = c.epochs;
        o["batch_size"] = c.batch_size;
        o["lr_peak"] = c.lr_peak;
        o["lr_init"] = c.lr_init;
        o["warmup_epochs"] = c.warmup_epochs;
        o["beta1"] = c.beta1;
        o["beta2"] = c.beta2;
        o["weight_decay"] = c.weight_decay;
        o["smooth_l1_beta"] = c.smooth_l1_beta;
        o["seed"] = c.seed;
        return o;
    };
    j["train"]["primary"] = train_json(train_primary);
    j["train"]["secondary"] = train_json(train_secondary);

    j["regions"]["primary_extent"] = primary_extent;
    j["regions"]["secondary_extent"] = secondary_extent;
    j["compose"]["feather_voxels"] = compose_feather_voxels;
    j["eval"]["shift_mm"] = eval_shift_mm;
    j["eval"]["noise_sigma"] = projection_noise_sigma;
    std::vector<std::string> crits;
    for (const auto& c : gamma_criteria) crits.push_back(c.label());
    j["eval"]["gamma"] = crits;
    j["eval"]["dose_gamma"] = dose_gamma.label();
    j["dose"]["prescription_gy"] = dose.prescription_gy;
    j["dose"]["lateral_sigma_mm"] = dose.lateral_sigma_mm;
    return j.dump(2);
}

std::string RunConfig::config_hash() const {
    const std::string s = canonical_json();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig load_run_config(const std::string& path) {
    ConfigTree t = parse_config_file(path);
    RunConfig cfg = default_desk_config();

    cfg.workspace = t.get_string("workspace", cfg.workspace);
    cfg.seed = std::uint64_t(t.get_int("seed", std::int64_t(cfg.seed)));

    apply_phantom(t, cfg.phantom, cfg.seed);
    apply_geometry(t, cfg.geometry);
    apply_grss(t, "augment.primary.", cfg.grss_primary);
    apply_grss(t, "augment.secondary.", cfg.grss_secondary);
    apply_model(t, "model.primary.", cfg.model_primary);
    apply_model(t, "model.secondary.", cfg.model_secondary);
    apply_train(t, "train.primary.", cfg.train_primary);
    apply_train(t, "train.secondary.", cfg.train_secondary);

    if (t.has("regions.primary_extent"))
        cfg.primary_extent = to_int3(t.get_array("regions.primary_extent", 3),
                                     "regions.primary_extent");
    if (t.has("regions.secondary_extent"))
        cfg.secondary_extent = to_int3(t.get_array("regions.secondary_extent", 3),
                                       "regions.secondary_extent");
    cfg.compose_feather_voxels =
        int(t.get_int("compose.feather_voxels", cfg.compose_feather_voxels));
    cfg.eval_shift_mm = t.get_double("eval.shift_mm", cfg.eval_shift_mm);
    cfg.projection_noise_sigma = t.get_double("eval.noise_sigma", cfg.projection_noise_sigma);
    if (t.has("eval.gamma")) {
        cfg.gamma_criteria.clear();
        for (const auto& s : t.get_string_array("eval.gamma"))
            cfg.gamma_criteria.push_back(parse_criteria(s, "eval.gamma"));
    }
    if (t.has("eval.dose_gamma"))
        cfg.dose_gamma = parse_criteria(t.get_string("eval.dose_gamma", ""), "eval.dose_gamma");
    cfg.dose.prescription_gy = t.get_double("dose.prescription_gy", cfg.dose.prescription_gy);
    cfg.dose.lateral_sigma_mm = t.get_double("dose.lateral_sigma_mm", cfg.dose.lateral_sigma_mm);

    const auto unused = t.unused_keys();
    if (!unused.empty()) {
        std::string msg = "config " + path + ": unknown key(s):";
        for (const auto& k : unused) msg += " " + k;
        throw ConfigError(msg);
    }
    cfg.validate();
    return cfg;
}

}  // namespace kv2ct
