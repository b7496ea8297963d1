// config.hpp - preset file parsing (TOML subset) and the full run
// configuration that drives the pipeline.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kv2ct/compose.hpp"
#include "kv2ct/dose.hpp"
#include "kv2ct/eval.hpp"
#include "kv2ct/geometry.hpp"
#include "kv2ct/grss.hpp"
#include "kv2ct/model.hpp"
#include "kv2ct/phantom.hpp"
#include "kv2ct/training.hpp"

namespace kv2ct {

// Minimal TOML subset: `[section]` / `[section.sub]` headers, `key = value`
// lines, `#` comments, values are strings, numbers, booleans or flat arrays.
// Values are kept as token strings; typed access parses on demand and records
// which keys were consumed so unknown keys can be rejected.
class ConfigTree {
  public:
    void set(const std::string& key, std::vector<std::string> tokens);
    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    // Fixed-length numeric arrays; throws on length mismatch.
    std::vector<double> get_array(const std::string& key, std::size_t n) const;
    std::vector<std::string> get_string_array(const std::string& key) const;

    // Keys present in the file but never consumed by a getter.
    std::vector<std::string> unused_keys() const;

  private:
    const std::vector<std::string>* find(const std::string& key) const;

    std::map<std::string, std::vector<std::string>> values_;
    mutable std::set<std::string> consumed_;
};

ConfigTree parse_config_text(const std::string& text, const std::string& origin = "<text>");
ConfigTree parse_config_file(const std::string& path);

// Everything one experiment needs. Defaults are the desk-scale preset.
struct RunConfig {
    std::string workspace = "workspace";
    std::uint64_t seed = 1;

    PhantomSpec phantom;
    GeometrySpec geometry;
    GrssConfig grss_primary, grss_secondary;
    ModelConfig model_primary, model_secondary;
    TrainConfig train_primary, train_secondary;

    // CT crop boxes are derived at run time: the primary box is centred in the
    // phantom volume with this extent; the secondary box is centred on the
    // head-mask bounding box (clamped into the primary box).
    std::array<int, 3> primary_extent{64, 40, 40};
    std::array<int, 3> secondary_extent{32, 24, 24};

    int compose_feather_voxels = 2;
    double eval_shift_mm = 2.0;  // held-out S-I shift for the evaluation pair
    double projection_noise_sigma = 0.0;
    std::vector<GammaCriteria> gamma_criteria{{3, 3, 10}, {3, 2, 10}, {2, 2, 10}};
    GammaCriteria dose_gamma{3, 3, 10};
    DoseFieldSpec dose;

    void validate() const;
    // Canonical JSON echo of every field (used for hashing and the report).
    std::string canonical_json() const;
    // FNV-1a 64-bit over canonical_json, hex string; keys stage caches.
    std::string config_hash() const;
};

RunConfig default_desk_config();
// Defaults overlaid with the file; rejects unknown keys; validates.
RunConfig load_run_config(const std::string& path);

}  // namespace kv2ct
