// pipeline.hpp - end-to-end experiment orchestration over a workspace
// directory: phantom -> project -> augment -> train -> synthesize -> compose
// -> evaluate -> report. Each stage persists its artifacts plus a marker
// keyed by the config hash, so completed stages are skipped on re-run.
#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "kv2ct/config.hpp"
#include "kv2ct/phantom.hpp"
#include "kv2ct/report.hpp"

namespace kv2ct {

// Crop boxes resolved against the generated phantom (the secondary box tracks
// the head mask, which moves with the per-seed jitter).
struct RunRegions {
    BoxIndices primary_box;     // full-volume voxel indices
    BoxIndices secondary_box;   // full-volume voxel indices
    BoxIndices head_box_local;  // secondary box in primary-crop coordinates
    std::array<int, 2> secondary_kv_origin{0, 0};  // detector pixels (u0, v0)
};

RunRegions derive_regions(const RunConfig& cfg, const StructureMaskSet& masks);
void write_regions(const RunRegions& r, const std::string& path);
RunRegions read_regions(const std::string& path);

struct PipelineResult {
    MetricReport metrics;
    std::map<std::string, std::string> artifacts;
    std::map<std::string, double> extras;
    std::string report_path;
};

// Stages. Each throws with its stage name and the offending path on failure;
// `force` recomputes even when the cached marker matches the config hash.
void stage_phantom(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
void stage_project(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
void stage_augment(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
// which: "primary", "secondary" or "both".
void stage_train(const RunConfig& cfg, const std::string& which, bool force = false,
                 std::ostream* log = nullptr);
void stage_synthesize(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
void stage_compose(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
MetricReport stage_evaluate(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);
// Assembles report.json from persisted stage outputs (runs no computation).
PipelineResult stage_report(const RunConfig& cfg, std::ostream* log = nullptr);

PipelineResult run_pipeline(const RunConfig& cfg, bool force = false, std::ostream* log = nullptr);

}  // namespace kv2ct
