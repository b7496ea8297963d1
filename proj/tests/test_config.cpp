#include <cstdio>
#include <fstream>
#include <string>

#include "doctest.h"
#include "kv2ct/config.hpp"

using namespace kv2ct;

namespace {

std::string write_temp(const std::string& text) {
    static int counter = 0;
    std::string path = "/tmp/kv2ct_cfg_" + std::to_string(++counter) + ".toml";
    std::ofstream out(path, std::ios::binary);
    out << text;
    return path;
}

// Preset files live next to the sources; tests run from the build tree.
std::string preset_path(const std::string& name) {
    for (const std::string& root : {"presets/", "../presets/", "../../presets/"}) {
        std::ifstream probe(root + name);
        if (probe) return root + name;
    }
    return "";
}

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("parser handles sections, arrays, comments and strings") {
        const std::string text = R"(
# top comment
title = "hello # not a comment"
count = 3

[outer]
value = 2.5
flag = true

[outer.inner]
dims = [4, 5, 6]   # trailing comment
names = ["a", "b"]
)";
        ConfigTree t = parse_config_text(text);
        CHECK(t.get_string("title", "") == "hello # not a comment");
        CHECK(t.get_int("count", 0) == 3);
        CHECK(t.get_double("outer.value", 0) == 2.5);
        CHECK(t.get_bool("outer.flag", false) == true);
        auto dims = t.get_array("outer.inner.dims", 3);
        CHECK(dims[0] == 4);
        CHECK(dims[2] == 6);
        auto names = t.get_string_array("outer.inner.names");
        REQUIRE(names.size() == 2);
        CHECK(names[1] == "b");
        CHECK(t.unused_keys().empty());
    }

    TEST_CASE("parser fallbacks and type errors") {
        ConfigTree t = parse_config_text("a = 1\nb = x\narr = [1, 2]\n");
        CHECK(t.get_int("missing", 42) == 42);
        CHECK(t.get_double("missing", 1.5) == 1.5);
        CHECK(t.get_string("missing", "dflt") == "dflt");
        CHECK_THROWS_AS(t.get_int("b", 0), ConfigError);
        CHECK_THROWS_AS(t.get_double("b", 0), ConfigError);
        CHECK_THROWS_AS(t.get_bool("a", false), ConfigError);  // 1 is not true/false
        CHECK_THROWS_AS(t.get_array("arr", 3), ConfigError);   // length mismatch
        CHECK_THROWS_AS(t.get_array("missing", 3), ConfigError);
    }

    TEST_CASE("parser syntax errors carry line information") {
        CHECK_THROWS_WITH_AS(parse_config_text("x == 1\njunk\n", "f.toml"),
                             doctest::Contains("f.toml:2"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("[unterminated\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("k = [1, 2\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("k = 1\nk = 2\n"), ConfigError);  // duplicate
        CHECK_THROWS_AS(parse_config_text("k =\n"), ConfigError);           // empty value
    }

    TEST_CASE("default desk config validates and hashes deterministically") {
        RunConfig cfg = default_desk_config();
        cfg.validate();
        const std::string h1 = cfg.config_hash();
        const std::string h2 = cfg.config_hash();
        CHECK(h1 == h2);
        CHECK(h1.size() == 16);
        RunConfig other = default_desk_config();
        other.seed = 2;
        CHECK(other.config_hash() != h1);
        other = default_desk_config();
        other.train_primary.epochs += 1;
        CHECK(other.config_hash() != h1);
        // canonical json stable across calls
        CHECK(cfg.canonical_json() == default_desk_config().canonical_json());
    }

    TEST_CASE("load overlays file values onto defaults") {
        const std::string path = write_temp(R"(
seed = 7
workspace = "ws_x"
[train.primary]
epochs = 5
[eval]
shift_mm = 1.0
gamma = ["2,2,10"]
)");
        RunConfig cfg = load_run_config(path);
        CHECK(cfg.seed == 7);
        CHECK(cfg.workspace == "ws_x");
        CHECK(cfg.phantom.seed == 7);  // follows the run seed unless overridden
        CHECK(cfg.train_primary.epochs == 5);
        CHECK(cfg.train_secondary.epochs == default_desk_config().train_secondary.epochs);
        CHECK(cfg.eval_shift_mm == 1.0);
        REQUIRE(cfg.gamma_criteria.size() == 1);
        CHECK(cfg.gamma_criteria[0].dd_percent == 2.0);
        std::remove(path.c_str());
    }

    TEST_CASE("unknown keys are rejected") {
        const std::string path = write_temp("typo_key = 1\n");
        CHECK_THROWS_WITH_AS(load_run_config(path), doctest::Contains("typo_key"), ConfigError);
        std::remove(path.c_str());
        const std::string path2 = write_temp("[train.primary]\nepochz = 5\n");
        CHECK_THROWS_WITH_AS(load_run_config(path2), doctest::Contains("epochz"), ConfigError);
        std::remove(path2.c_str());
    }

    TEST_CASE("cross-field consistency checks") {
        RunConfig cfg = default_desk_config();
        SUBCASE("kv crop must match model input") {
            cfg.grss_primary.kv_downsample = {4, 6};  // 240/4 = 60 != 40
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
        SUBCASE("region extent must divide into model output") {
            cfg.primary_extent = {64, 40, 36};
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
        SUBCASE("secondary region must fit inside primary") {
            cfg.secondary_extent = {32, 48, 24};  // 48 > 40 in A-P
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
        SUBCASE("feather must leave room in the head box") {
            cfg.compose_feather_voxels = 12;  // 2*12 >= 24
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
        SUBCASE("gamma list must not be empty") {
            cfg.gamma_criteria.clear();
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
        SUBCASE("tags are pinned") {
            cfg.model_secondary.model_tag = "primary";
            CHECK_THROWS_AS(cfg.validate(), ConfigError);
        }
    }

    TEST_CASE("shipped presets parse and validate") {
        const std::string desk = preset_path("desk.toml");
        REQUIRE(!desk.empty());
        RunConfig d = load_run_config(desk);
        CHECK(d.grss_primary.kv_downsample[0] * d.grss_primary.kv_downsample[1] == 36);
        CHECK(d.grss_secondary.kv_downsample[0] * d.grss_secondary.kv_downsample[1] == 4);
        CHECK(d.model_primary.param_count() == 1611088);
        CHECK(d.model_primary.output_dims() == std::array<int, 3>{64, 40, 40});
        CHECK(d.model_secondary.output_dims() == std::array<int, 3>{32, 24, 24});
        CHECK(d.grss_primary.shift_schedule().size() == 7);  // +-3 step 1

        const std::string mini = preset_path("desk_mini.toml");
        REQUIRE(!mini.empty());
        RunConfig m = load_run_config(mini);
        CHECK(m.train_primary.epochs < d.train_primary.epochs);
        CHECK_FALSE(m.grss_primary.phase_enumeration);

        const std::string clinical = preset_path("clinical.toml");
        REQUIRE(!clinical.empty());
        RunConfig c = load_run_config(clinical);
        CHECK(c.primary_extent[0] == 448);
        CHECK(c.grss_primary.shift_schedule().size() == 101);  // +-5 step 0.1
        CHECK(c.model_primary.output_dims() == std::array<int, 3>{224, 168, 168});
        CHECK(c.train_primary.batch_size == 300);
        // different presets hash differently
        CHECK(d.config_hash() != m.config_hash());
        CHECK(d.config_hash() != c.config_hash());
    }
}
