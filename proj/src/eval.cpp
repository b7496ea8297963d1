#include "kv2ct/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace kv2ct {

namespace {

void require_mask(const Volume3D& vol, const std::vector<std::uint8_t>* mask,
                  const std::string& what) {
    if (mask && std::int64_t(mask->size()) != vol.voxel_count())
        throw ShapeError(what + ": mask size " + std::to_string(mask->size()) +
                         " does not match voxel count " + std::to_string(vol.voxel_count()));
}

}  // namespace

double mae(const Volume3D& a, const Volume3D& b, const std::vector<std::uint8_t>* mask) {
    a.require_same_grid(b, "mae");
    require_mask(a, mask, "mae");
    double sum = 0.0;
    std::int64_t n = 0;
    const std::int64_t total = a.voxel_count();
    for (std::int64_t i = 0; i < total; ++i) {
        if (mask && !(*mask)[i]) continue;
        sum += std::abs(double(a.data[i]) - double(b.data[i]));
        ++n;
    }
    if (n == 0) throw ConfigError("mae: mask selects no voxels");
    return sum / double(n);
}

void CdvhCurve::validate() const {
    if (threshold.size() != fraction.size() || threshold.empty())
        throw ShapeError("cdvh: threshold/fraction size mismatch");
    for (std::size_t i = 0; i < fraction.size(); ++i) {
        if (fraction[i] < 0.0 || fraction[i] > 1.0)
            throw NumericError("cdvh: fraction outside [0,1]");
        if (i > 0 && fraction[i] > fraction[i - 1])
            throw NumericError("cdvh: fraction increases at threshold " +
                               std::to_string(threshold[i]));
    }
}

CdvhCurve cdvh(const Volume3D& a, const Volume3D& b, const std::vector<std::uint8_t>* mask) {
    a.require_same_grid(b, "cdvh");
    require_mask(a, mask, "cdvh");
    constexpr int kMaxT = 500;
    // diff[t] accumulates how many voxels stop contributing at threshold t;
    // a voxel with |d| contributes to every integer t < |d| (strict).
    std::vector<std::int64_t> diff(kMaxT + 2, 0);
    std::int64_t n = 0;
    const std::int64_t total = a.voxel_count();
    for (std::int64_t i = 0; i < total; ++i) {
        if (mask && !(*mask)[i]) continue;
        ++n;
        const double d = std::abs(double(a.data[i]) - double(b.data[i]));
        if (d <= 0.0) continue;
        // largest integer threshold the voxel still exceeds
        double fl = std::floor(d);
        int upper = (d > fl) ? int(fl) : int(fl) - 1;
        if (upper > kMaxT) upper = kMaxT;
        if (upper < 0) continue;
        diff[0] += 1;
        diff[upper + 1] -= 1;
    }
    if (n == 0) throw ConfigError("cdvh: mask selects no voxels");
    CdvhCurve out;
    out.threshold.resize(kMaxT + 1);
    out.fraction.resize(kMaxT + 1);
    std::int64_t run = 0;
    for (int t = 0; t <= kMaxT; ++t) {
        run += diff[t];
        out.threshold[t] = double(t);
        out.fraction[t] = double(run) / double(n);
    }
    return out;
}

void GammaCriteria::validate() const {
    if (!(dd_percent > 0.0)) throw ConfigError("gamma: dd_percent must be positive");
    if (!(dta_mm > 0.0)) throw ConfigError("gamma: dta_mm must be positive");
    if (low_threshold_percent < 0.0 || low_threshold_percent > 100.0)
        throw ConfigError("gamma: low_threshold_percent must be in [0,100]");
}

std::string GammaCriteria::label() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g%%/%gmm/%g%%", dd_percent, dta_mm, low_threshold_percent);
    return buf;
}

namespace {

struct GammaOffset {
    double dist_term;  // |offset|^2 / dta^2, equals n2/100 on the dta/10 lattice
    double dvx, dvy, dvz;  // offset in fractional voxel units of the eval grid
};

// Sub-grid lattice with step dta/10 inside the search ball of radius 2*dta,
// sorted by distance (ties broken lexicographically, so the order is exact).
std::vector<GammaOffset> make_offsets(double dta_mm, const std::array<double, 3>& spacing) {
    struct Raw {
        int n2, i, j, k;
    };
    std::vector<Raw> raw;
    raw.reserve(34000);
    for (int i = -20; i <= 20; ++i)
        for (int j = -20; j <= 20; ++j)
            for (int k = -20; k <= 20; ++k) {
                const int n2 = i * i + j * j + k * k;
                if (n2 <= 400) raw.push_back({n2, i, j, k});
            }
    std::sort(raw.begin(), raw.end(), [](const Raw& a, const Raw& b) {
        if (a.n2 != b.n2) return a.n2 < b.n2;
        if (a.i != b.i) return a.i < b.i;
        if (a.j != b.j) return a.j < b.j;
        return a.k < b.k;
    });
    const double step = dta_mm / 10.0;
    std::vector<GammaOffset> out(raw.size());
    for (std::size_t t = 0; t < raw.size(); ++t) {
        out[t].dist_term = double(raw[t].n2) / 100.0;
        out[t].dvx = raw[t].i * step / spacing[0];
        out[t].dvy = raw[t].j * step / spacing[1];
        out[t].dvz = raw[t].k * step / spacing[2];
    }
    return out;
}

GammaResult gamma_impl(const Volume3D& ref, const Volume3D& ev, const GammaCriteria& crit,
                       bool optimized, std::vector<float>* gamma_map) {
    crit.validate();
    ref.require_same_grid(ev, "gamma3d");
    const std::int64_t total = ref.voxel_count();
    if (total == 0) throw ShapeError("gamma3d: empty volume");

    double max_ref = -std::numeric_limits<double>::infinity();
    for (float v : ref.data) max_ref = std::max(max_ref, double(v));
    if (!(max_ref > 0.0))
        throw NumericError("gamma3d: reference maximum is not positive; cannot normalize");
    const double dd_abs = crit.dd_percent / 100.0 * max_ref;
    const double thr = crit.low_threshold_percent / 100.0 * max_ref;
    const double inv_dd = 1.0 / dd_abs;

    const auto offsets = make_offsets(crit.dta_mm, ev.spacing_mm);
    const int nx = ref.dims[0], ny = ref.dims[1], nz = ref.dims[2];
    const double bx = nx - 1, by = ny - 1, bz = nz - 1;
    const bool want_map = gamma_map != nullptr;
    if (want_map)
        gamma_map->assign(std::size_t(total), std::numeric_limits<float>::quiet_NaN());

    // 0 below threshold, 1 fail, 2 pass; filled independently per voxel so the
    // result is thread-count invariant.
    std::vector<std::uint8_t> status(std::size_t(total), 0);
    parallel_for(total, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t v = lo; v < hi; ++v) {
            const double refv = ref.data[std::size_t(v)];
            if (refv < thr) continue;
            const int x = int(v % nx);
            const int y = int((v / nx) % ny);
            const int z = int(v / (std::int64_t(nx) * ny));
            double best = std::numeric_limits<double>::infinity();
            for (const auto& it : offsets) {
                if (optimized) {
                    if (it.dist_term >= best) break;  // sorted: nothing can improve
                    if (!want_map) {
                        // rate-only: pass is decided once best <= 1, and no
                        // offset with dist_term > 1 can flip a fail to a pass.
                        if (best <= 1.0 || it.dist_term > 1.0) break;
                    }
                }
                const double fx = x + it.dvx, fy = y + it.dvy, fz = z + it.dvz;
                if (fx < 0.0 || fy < 0.0 || fz < 0.0 || fx > bx || fy > by || fz > bz)
                    continue;  // outside the eval support: not a valid position
                const double val = trilinear_sample(ev, fx, fy, fz, 0.0f);
                const double dd = (val - refv) * inv_dd;
                const double totterm = it.dist_term + dd * dd;
                if (totterm < best) best = totterm;
            }
            status[std::size_t(v)] = best <= 1.0 ? 2 : 1;
            if (want_map) (*gamma_map)[std::size_t(v)] = float(std::sqrt(best));
        }
    });

    GammaResult res;
    for (std::uint8_t s : status) {
        if (s == 0) continue;
        ++res.considered;
        if (s == 2) ++res.passed;
    }
    if (res.considered == 0)
        throw NumericError("gamma3d: no reference voxels at or above the low-dose threshold");
    res.pass_percent = 100.0 * double(res.passed) / double(res.considered);
    return res;
}

}  // namespace

GammaResult gamma3d(const Volume3D& ref, const Volume3D& eval, const GammaCriteria& crit,
                    std::vector<float>* gamma_map) {
    return gamma_impl(ref, eval, crit, true, gamma_map);
}

GammaResult gamma3d_bruteforce(const Volume3D& ref, const Volume3D& eval,
                               const GammaCriteria& crit, std::vector<float>* gamma_map) {
    return gamma_impl(ref, eval, crit, false, gamma_map);
}

GammaBothWays gamma3d_both(const Volume3D& first, const Volume3D& second,
                           const GammaCriteria& crit) {
    GammaBothWays out;
    out.ref_first = gamma3d(first, second, crit);
    out.ref_second = gamma3d(second, first, crit);
    out.mean_percent = 0.5 * (out.ref_first.pass_percent + out.ref_second.pass_percent);
    return out;
}

// ---- DVH ----

namespace {

std::vector<float> masked_doses(const Volume3D& dose, const std::vector<std::uint8_t>& mask,
                                const std::string& what) {
    if (std::int64_t(mask.size()) != dose.voxel_count())
        throw ShapeError(what + ": mask size does not match dose grid");
    std::vector<float> vals;
    vals.reserve(mask.size() / 8);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) vals.push_back(dose.data[i]);
    if (vals.empty()) throw ConfigError(what + ": structure mask is empty");
    return vals;
}

// d sorted descending. Largest dose received by at least fraction t of the
// volume, linear between the rank points f(k) = (k+1)/n.
double interp_sorted_desc(const std::vector<float>& d, double t) {
    const std::size_t n = d.size();
    if (t <= 1.0 / double(n)) return d[0];
    if (t >= 1.0) return d[n - 1];
    const double pos = t * double(n);            // in (1, n)
    std::size_t k = std::size_t(std::ceil(pos)) - 1;  // smallest k with f(k) >= t
    if (k < 1) k = 1;
    if (k > n - 1) k = n - 1;
    const double fk1 = double(k) / double(n);
    const double fk = double(k + 1) / double(n);
    const double w = (t - fk1) / (fk - fk1);
    return double(d[k - 1]) + (double(d[k]) - double(d[k - 1])) * w;
}

}  // namespace

double dvh_dx_percent(const Volume3D& dose, const std::vector<std::uint8_t>& mask,
                      double x_percent) {
    if (!(x_percent > 0.0) || x_percent > 100.0)
        throw ConfigError("Dx%: x_percent must be in (0,100]");
    auto vals = masked_doses(dose, mask, "Dx%");
    std::sort(vals.begin(), vals.end(), std::greater<float>());
    return interp_sorted_desc(vals, x_percent / 100.0);
}

double dvh_dcc(const Volume3D& dose, const std::vector<std::uint8_t>& mask, double cc) {
    if (!(cc > 0.0)) throw ConfigError("Dcc: volume must be positive");
    auto vals = masked_doses(dose, mask, "Dcc");
    const double voxel_cc = dose.voxel_volume_mm3() / 1000.0;
    const double total_cc = double(vals.size()) * voxel_cc;
    if (cc > total_cc) {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "Dcc: requested volume %.4gcc exceeds structure volume %.4gcc", cc,
                      total_cc);
        throw NumericError(buf);
    }
    std::sort(vals.begin(), vals.end(), std::greater<float>());
    return interp_sorted_desc(vals, cc / total_cc);
}

double dvh_mean(const Volume3D& dose, const std::vector<std::uint8_t>& mask) {
    auto vals = masked_doses(dose, mask, "Mean");
    double sum = 0.0;
    for (float v : vals) sum += v;
    return sum / double(vals.size());
}

std::map<std::string, std::map<std::string, double>> dvh_indices(const Volume3D& dose,
                                                                 const StructureMaskSet& masks,
                                                                 const DvhSpec& spec) {
    if (masks.dims != dose.dims) throw ShapeError("dvh_indices: mask dims do not match dose");
    const double voxel_cc = dose.voxel_volume_mm3() / 1000.0;
    std::map<std::string, std::map<std::string, double>> out;
    for (const auto& [name, mask] : masks.masks) {
        std::int64_t count = 0;
        for (auto m : mask) count += m ? 1 : 0;
        if (count == 0) continue;  // disabled structures carry empty masks
        auto& row = out[name];
        for (double x : spec.d_percent) {
            char label[32];
            std::snprintf(label, sizeof(label), "D%g%%", x);
            row[label] = dvh_dx_percent(dose, mask, x);
        }
        for (double cc : spec.d_cc) {
            if (cc > double(count) * voxel_cc) continue;  // structure too small
            char label[32];
            std::snprintf(label, sizeof(label), "D%gcc", cc);
            row[label] = dvh_dcc(dose, mask, cc);
        }
        if (spec.mean) row["Mean"] = dvh_mean(dose, mask);
    }
    return out;
}

// ---- shift error ----

ShiftErrorResult shift_error(const Volume3D& ssct, const Volume3D& sgct) {
    ssct.require_same_grid(sgct, "shift_error");
    // Candidate order (|delta|, delta) makes "strictly better wins" resolve
    // ties toward the smaller magnitude, negative before positive.
    std::vector<int> order;
    order.reserve(21);
    order.push_back(0);
    for (int m = 1; m <= 10; ++m) {
        order.push_back(-m);
        order.push_back(m);
    }
    std::map<int, double> by_step;
    ShiftErrorResult res;
    bool first = true;
    for (int k : order) {
        const double delta = double(k) / 10.0;
        const Volume3D shifted = shift_volume(sgct, delta, Axis::SI);
        const double m = mae(ssct, shifted);
        by_step[k] = m;
        if (first || m < res.mae_at_min) {
            first = false;
            res.mae_at_min = m;
            res.delta_mm = delta;
        }
    }
    res.se_mm = std::abs(res.delta_mm);
    res.curve.reserve(by_step.size());
    for (const auto& [k, m] : by_step) res.curve.emplace_back(double(k) / 10.0, m);
    return res;
}

// ---- report serialization ----

std::string metric_report_json(const MetricReport& rep) {
    nlohmann::json j;
    j["mae_hu"] = rep.mae_hu;
    j["cdvh"]["threshold"] = rep.cdvh.threshold;
    j["cdvh"]["fraction"] = rep.cdvh.fraction;
    j["gamma_pass_percent"] = rep.gamma_pass_percent;
    j["dvh"] = rep.dvh;
    j["shift_error_mm"] = rep.shift_error_mm;
    j["shift_delta_mm"] = rep.shift_delta_mm;
    return j.dump(2) + "\n";
}

void write_metric_report_json(const MetricReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << metric_report_json(rep);
    if (!out) throw IoError("failed writing " + path);
}

MetricReport read_metric_report_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
        MetricReport rep;
        rep.mae_hu = j.at("mae_hu").get<double>();
        rep.cdvh.threshold = j.at("cdvh").at("threshold").get<std::vector<double>>();
        rep.cdvh.fraction = j.at("cdvh").at("fraction").get<std::vector<double>>();
        rep.gamma_pass_percent =
            j.at("gamma_pass_percent")
                .get<std::map<std::string, std::map<std::string, double>>>();
        rep.dvh = j.at("dvh").get<std::map<std::string, std::map<std::string, double>>>();
        rep.shift_error_mm = j.at("shift_error_mm").get<double>();
        rep.shift_delta_mm = j.at("shift_delta_mm").get<double>();
        return rep;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed metric report " + path + ": " + e.what());
    }
}

void write_cdvh_csv(const CdvhCurve& curve, const std::string& path) {
    curve.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "threshold,fraction\n";
    char buf[64];
    for (std::size_t i = 0; i < curve.threshold.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%g,%.9e\n", curve.threshold[i], curve.fraction[i]);
        out << buf;
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace kv2ct
