// eval.hpp - metric suite: masked MAE, cumulative difference-volume histogram,
// 3D gamma analysis (optimized + brute-force oracle), DVH indices, and the
// S-I shift-error search.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kv2ct/phantom.hpp"
#include "kv2ct/volume.hpp"

namespace kv2ct {

// Mean |a-b| over mask voxels (all voxels when mask is null).
double mae(const Volume3D& a, const Volume3D& b, const std::vector<std::uint8_t>* mask = nullptr);

// Survival curve of |a-b| on the fixed threshold grid 0..500 step 1:
// fraction[t] = fraction of masked voxels with |a-b| strictly above t.
struct CdvhCurve {
    std::vector<double> threshold;  // 501 entries
    std::vector<double> fraction;

    void validate() const;  // non-increasing, within [0,1]
};

CdvhCurve cdvh(const Volume3D& a, const Volume3D& b,
               const std::vector<std::uint8_t>* mask = nullptr);

struct GammaCriteria {
    double dd_percent = 2.0;          // intensity criterion, % of max(ref)
    double dta_mm = 2.0;              // distance-to-agreement
    double low_threshold_percent = 10.0;  // exclude ref voxels below this % of max(ref)

    void validate() const;
    std::string label() const;  // e.g. "2%/2mm/10%"
};

struct GammaResult {
    double pass_percent = 0.0;
    std::int64_t considered = 0;
    std::int64_t passed = 0;
};

// gamma(r) = min over evaluated positions e with |e-r| <= 2*dta (sub-grid step
// dta/10, trilinear interpolation, positions outside the eval support skipped)
// of sqrt(|e-r|^2/dta^2 + (eval(e)-ref(r))^2/(dd*max(ref))^2). A voxel passes
// when gamma <= 1. gamma_map (if non-null) receives per-voxel gamma, NaN for
// voxels below the low threshold.
GammaResult gamma3d(const Volume3D& ref, const Volume3D& eval, const GammaCriteria& crit,
                    std::vector<float>* gamma_map = nullptr);

// Exhaustive search over the full sub-grid ball, no early exit. Oracle for
// gamma3d; identical per-voxel result by construction of the pruning rule.
GammaResult gamma3d_bruteforce(const Volume3D& ref, const Volume3D& eval,
                               const GammaCriteria& crit, std::vector<float>* gamma_map = nullptr);

// Both reference choices plus their mean (the criterion is asymmetric).
struct GammaBothWays {
    GammaResult ref_first, ref_second;
    double mean_percent = 0.0;
};

GammaBothWays gamma3d_both(const Volume3D& first, const Volume3D& second,
                           const GammaCriteria& crit);

// ---- DVH ----

// Dx%: largest dose d such that at least x% of the structure volume receives
// >= d, rank-interpolated between sorted voxel doses.
double dvh_dx_percent(const Volume3D& dose, const std::vector<std::uint8_t>& mask,
                      double x_percent);
// Dv_cc: same with an absolute volume (cm^3), from the voxel volume.
double dvh_dcc(const Volume3D& dose, const std::vector<std::uint8_t>& mask, double cc);
double dvh_mean(const Volume3D& dose, const std::vector<std::uint8_t>& mask);

struct DvhSpec {
    std::vector<double> d_percent{95.0, 2.0};
    std::vector<double> d_cc{0.01};
    bool mean = true;
};

// structure name -> index label ("D95%", "D0.01cc", "Mean") -> value.
std::map<std::string, std::map<std::string, double>> dvh_indices(const Volume3D& dose,
                                                                 const StructureMaskSet& masks,
                                                                 const DvhSpec& spec);

// ---- shift error ----

struct ShiftErrorResult {
    double delta_mm = 0.0;  // argmin shift applied to the reference
    double se_mm = 0.0;     // |delta_mm|
    double mae_at_min = 0.0;
    std::vector<std::pair<double, double>> curve;  // (delta, MAE), 21 entries
};

// Search delta in {-1.0..+1.0 step 0.1} mm along S-I; ties go to smaller
// |delta| (negative before positive at equal magnitude).
ShiftErrorResult shift_error(const Volume3D& ssct, const Volume3D& sgct);

// ---- aggregate report ----

struct MetricReport {
    double mae_hu = 0.0;
    CdvhCurve cdvh;
    // criteria label -> {"ref_gct", "ref_sct", "mean"} -> pass %
    std::map<std::string, std::map<std::string, double>> gamma_pass_percent;
    // structure -> index -> value
    std::map<std::string, std::map<std::string, double>> dvh;
    double shift_error_mm = 0.0;
    double shift_delta_mm = 0.0;
};

// Deterministic JSON serialization (sorted keys, no timestamps).
std::string metric_report_json(const MetricReport& rep);
void write_metric_report_json(const MetricReport& rep, const std::string& path);
MetricReport read_metric_report_json(const std::string& path);
void write_cdvh_csv(const CdvhCurve& curve, const std::string& path);

}  // namespace kv2ct
