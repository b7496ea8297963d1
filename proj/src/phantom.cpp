#include "kv2ct/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

namespace kv2ct {

using nlohmann::json;

const std::vector<std::uint8_t>& StructureMaskSet::mask(const std::string& name) const {
    auto it = masks.find(name);
    if (it == masks.end()) throw ConfigError("unknown structure mask: " + name);
    return it->second;
}

std::int64_t StructureMaskSet::voxel_count(const std::string& name) const {
    const auto& m = mask(name);
    return std::count(m.begin(), m.end(), std::uint8_t(1));
}

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] <= 0) throw ConfigError("phantom: non-positive dims");
        if (!(spacing_mm[a] > 0.0)) throw ConfigError("phantom: non-positive spacing");
        if (!(head_radii_mm[a] > 0.0)) throw ConfigError("phantom: head radii must be positive");
        if (!(tumor_radii_mm[a] > 0.0)) throw ConfigError("phantom: tumor radii must be positive");
    }
    if (helmet_thickness_mm <= 0.0) throw ConfigError("phantom: helmet thickness must be positive");
    if (jitter_voxels < 0.0) throw ConfigError("phantom: jitter must be non-negative");
}

namespace {

struct P3 {
    double x, y, z;
};

inline bool in_ellipsoid(const P3& p, const P3& c, const P3& r) {
    const double dx = (p.x - c.x) / r.x, dy = (p.y - c.y) / r.y, dz = (p.z - c.z) / r.z;
    return dx * dx + dy * dy + dz * dz <= 1.0;
}

// All phantom geometry for one seeded instance, world mm.
struct Anatomy {
    const PhantomSpec& spec;
    P3 body_c, body_r;
    P3 head_c, head_r;
    P3 skull_outer, skull_inner;  // radii; centered on head_c
    P3 tumor_c, tumor_r;
    P3 stem_c;  // brain-stem cylinder, axis along z
    double stem_radius = 5.0, stem_half_len = 22.0;
    P3 parotid_l, parotid_r, parotid_rad;
    P3 oral_c, oral_r;
    P3 nasal_c, nasal_r, sinus_l, sinus_r, sinus_rad;
    P3 mand_c;  // mandible torus center
    double mand_ring = 20.0, mand_tube = 4.0;
    P3 spine_c;  // axis (x,y); z range in spine_z
    double spine_radius = 7.0;
    double spine_z0 = -58.0, spine_z1 = -6.0;
    P3 helmet_inner, helmet_outer;
    double helmet_cut_z = 0.0;

    explicit Anatomy(const PhantomSpec& s) : spec(s) {
        std::mt19937_64 rng(s.seed);
        auto draw3 = [&](double amp) {
            std::uniform_real_distribution<double> d(-amp, amp);
            // Fixed evaluation order (function-argument order is unspecified).
            const double x = d(rng), y = d(rng), z = d(rng);
            return P3{x, y, z};
        };
        const P3 g = draw3(1.0);
        const P3 gj = {g.x * s.jitter_voxels * s.spacing_mm[0],
                       g.y * s.jitter_voxels * s.spacing_mm[1],
                       g.z * s.jitter_voxels * s.spacing_mm[2]};
        // Per-feature wobble of half a voxel, always drawn in fixed order.
        const double half = 0.5;
        const P3 jh = scale(draw3(half)), jt = scale(draw3(half)), jb = scale(draw3(half)),
                 jp = scale(draw3(half)), jo = scale(draw3(half)), jm = scale(draw3(half)),
                 jc = scale(draw3(half)), js = scale(draw3(half));

        body_c = add({0.0, 0.0, -12.0}, gj);
        body_r = {78.0, 66.0, 54.0};
        head_c = add(add({s.head_center_mm[0], s.head_center_mm[1], s.head_center_mm[2]}, gj), jh);
        head_r = {s.head_radii_mm[0], s.head_radii_mm[1], s.head_radii_mm[2]};
        skull_outer = {std::max(1.0, head_r.x - 3.0), std::max(1.0, head_r.y - 3.0),
                       std::max(1.0, head_r.z - 3.0)};
        skull_inner = {std::max(0.5, head_r.x - 7.0), std::max(0.5, head_r.y - 7.0),
                       std::max(0.5, head_r.z - 7.0)};
        tumor_c = add(add({s.tumor_center_mm[0], s.tumor_center_mm[1], s.tumor_center_mm[2]}, gj),
                      jt);
        tumor_r = {s.tumor_radii_mm[0], s.tumor_radii_mm[1], s.tumor_radii_mm[2]};
        stem_c = add(add({0.0, 8.0, 6.0}, gj), jb);
        parotid_l = add(add({-19.0, 0.0, -2.0}, gj), jp);
        parotid_r = add(add({19.0, 0.0, -2.0}, gj), jp);
        parotid_rad = {5.0, 7.0, 8.0};
        oral_c = add(add({0.0, -24.0, -6.0}, gj), jo);
        oral_r = {10.0, 9.0, 7.0};
        nasal_c = add(rel_head({0.0, -20.0, -8.0}), jc);
        nasal_r = {5.0, 6.0, 5.0};
        sinus_l = add(rel_head({-10.0, -16.0, 0.0}), jc);
        sinus_r = add(rel_head({10.0, -16.0, 0.0}), jc);
        sinus_rad = {4.0, 5.0, 5.0};
        mand_c = add(add({0.0, -14.0, -2.0}, gj), jm);
        spine_c = add(add({0.0, 16.0, 0.0}, gj), js);
        spine_z0 = -58.0 + gj.z;
        spine_z1 = -6.0 + gj.z;
        helmet_inner = {head_r.x + 3.0, head_r.y + 3.0, head_r.z + 3.0};
        helmet_outer = {helmet_inner.x + s.helmet_thickness_mm,
                        helmet_inner.y + s.helmet_thickness_mm,
                        helmet_inner.z + s.helmet_thickness_mm};
        helmet_cut_z = head_c.z - 20.0;
    }

    P3 scale(const P3& v) const {
        return {v.x * spec.spacing_mm[0], v.y * spec.spacing_mm[1], v.z * spec.spacing_mm[2]};
    }
    static P3 add(const P3& a, const P3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    P3 rel_head(const P3& v) const { return {head_c.x + v.x, head_c.y + v.y, head_c.z + v.z}; }

    bool in_body_union(const P3& p) const {
        return spec.with_body && (in_ellipsoid(p, body_c, body_r) || in_ellipsoid(p, head_c, head_r));
    }
    bool in_head(const P3& p) const { return spec.with_body && in_ellipsoid(p, head_c, head_r); }
    bool in_skull(const P3& p) const {
        if (!spec.with_skull) return false;
        if (!in_ellipsoid(p, head_c, skull_outer) || in_ellipsoid(p, head_c, skull_inner))
            return false;
        // Foramen: keep a canal open around the brain-stem axis at the base.
        const double dx = p.x - stem_c.x, dy = p.y - stem_c.y;
        if (p.z < head_c.z - 15.0 && dx * dx + dy * dy < 7.5 * 7.5) return false;
        return true;
    }
    bool in_mandible(const P3& p) const {
        if (!spec.with_mandible || p.y > mand_c.y) return false;
        const double dx = p.x - mand_c.x, dy = p.y - mand_c.y;
        const double ring = std::sqrt(dx * dx + dy * dy) - mand_ring;
        const double dz = p.z - mand_c.z;
        return ring * ring + dz * dz <= mand_tube * mand_tube;
    }
    bool in_spine(const P3& p) const {
        if (!spec.with_spine || p.z < spine_z0 || p.z > spine_z1) return false;
        const double dx = p.x - spine_c.x, dy = p.y - spine_c.y;
        return dx * dx + dy * dy <= spine_radius * spine_radius;
    }
    bool in_tumor(const P3& p) const { return spec.with_tumor && in_ellipsoid(p, tumor_c, tumor_r); }
    bool in_cavity(const P3& p) const {
        return spec.with_cavities &&
               (in_ellipsoid(p, nasal_c, nasal_r) || in_ellipsoid(p, sinus_l, sinus_rad) ||
                in_ellipsoid(p, sinus_r, sinus_rad));
    }
    bool in_oral(const P3& p) const { return spec.with_body && in_ellipsoid(p, oral_c, oral_r); }
    bool in_stem(const P3& p) const {
        if (!spec.with_brainstem || std::abs(p.z - stem_c.z) > stem_half_len) return false;
        const double dx = p.x - stem_c.x, dy = p.y - stem_c.y;
        return dx * dx + dy * dy <= stem_radius * stem_radius;
    }
    bool in_parotid(const P3& p) const {
        return spec.with_body &&
               (in_ellipsoid(p, parotid_l, parotid_rad) || in_ellipsoid(p, parotid_r, parotid_rad));
    }
    bool in_brain(const P3& p) const {
        return spec.with_body && in_ellipsoid(p, head_c, skull_inner);
    }
    bool in_helmet(const P3& p) const {
        return spec.with_helmet && p.z >= helmet_cut_z &&
               in_ellipsoid(p, head_c, helmet_outer) && !in_ellipsoid(p, head_c, helmet_inner);
    }

    double hu_at(const P3& p) const {
        if (in_skull(p)) return 1000.0;
        if (in_mandible(p)) return 900.0;
        if (in_spine(p)) return 700.0;
        if (in_tumor(p)) return spec.tumor_hu;
        if (in_cavity(p)) return -1000.0;
        if (in_oral(p)) return -300.0;
        if (in_stem(p)) return 30.0;
        if (in_parotid(p)) return 45.0;
        if (in_brain(p)) return 35.0;
        if (in_body_union(p)) return 40.0;
        if (in_helmet(p)) return 150.0;
        return -1000.0;
    }
    bool in_bone(const P3& p) const { return in_skull(p) || in_mandible(p) || in_spine(p); }

    void check_bounds() const {
        const auto org = spec.origin_mm();
        P3 lo = {org[0] - 0.5 * spec.spacing_mm[0], org[1] - 0.5 * spec.spacing_mm[1],
                 org[2] - 0.5 * spec.spacing_mm[2]};
        P3 hi = {lo.x + spec.dims[0] * spec.spacing_mm[0], lo.y + spec.dims[1] * spec.spacing_mm[1],
                 lo.z + spec.dims[2] * spec.spacing_mm[2]};
        auto inside = [&](const P3& c, const P3& r, const char* what) {
            if (c.x - r.x < lo.x || c.x + r.x > hi.x || c.y - r.y < lo.y || c.y + r.y > hi.y ||
                c.z - r.z < lo.z || c.z + r.z > hi.z)
                throw ConfigError(std::string("phantom: ") + what + " extends outside the volume");
        };
        if (spec.with_body) inside(head_c, head_r, "head");
        if (spec.with_helmet) inside(head_c, helmet_outer, "helmet");
        if (spec.with_tumor) inside(tumor_c, tumor_r, "tumor");
    }
};

}  // namespace

PhantomResult generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const Anatomy anat(spec);
    anat.check_bounds();

    PhantomResult out;
    out.ct = Volume3D(spec.dims, spec.spacing_mm, spec.origin_mm(), "HU");
    out.masks.dims = spec.dims;
    for (const auto& name : structure_names())
        out.masks.masks[name].assign(std::size_t(out.ct.voxel_count()), 0);

    auto& body = out.masks.masks["BODY"];
    auto& head = out.masks.masks["HEAD"];
    auto& ctv = out.masks.masks["CTV"];
    auto& stem = out.masks.masks["BRAINSTEM"];
    auto& parotid = out.masks.masks["PAROTID"];
    auto& oral = out.masks.masks["ORAL_CAVITY"];
    auto& mandible = out.masks.masks["MANDIBLE"];

    // 2x2x2 supersampled anti-aliased HU; masks use voxel centers except the
    // mandible, which requires all sub-samples in bone so masked voxels keep
    // bone-level HU.
    const double q = 0.25;
    const double offs[2] = {-q, +q};
    parallel_for(spec.dims[2], [&](int z_lo, int z_hi) {
        for (int z = z_lo; z < z_hi; ++z)
            for (int y = 0; y < spec.dims[1]; ++y)
                for (int x = 0; x < spec.dims[0]; ++x) {
                    const Vec3 c = out.ct.voxel_center(x, y, z);
                    const P3 pc{c.x, c.y, c.z};
                    double acc = 0.0;
                    bool all_mand = true;
                    for (double ox : offs)
                        for (double oy : offs)
                            for (double oz : offs) {
                                const P3 p{c.x + ox * spec.spacing_mm[0],
                                           c.y + oy * spec.spacing_mm[1],
                                           c.z + oz * spec.spacing_mm[2]};
                                acc += anat.hu_at(p);
                                all_mand = all_mand && anat.in_mandible(p);
                            }
                    const auto idx = std::size_t(out.ct.index(x, y, z));
                    out.ct.data[idx] = float(acc / 8.0);
                    const bool in_body = anat.in_body_union(pc);
                    body[idx] = in_body;
                    head[idx] = in_body && anat.in_head(pc);
                    ctv[idx] = in_body && anat.in_tumor(pc);
                    stem[idx] = in_body && anat.in_stem(pc);
                    parotid[idx] = in_body && anat.in_parotid(pc);
                    oral[idx] = in_body && anat.in_oral(pc);
                    mandible[idx] = in_body && all_mand;
                }
    });
    return out;
}

BoxIndices mask_bbox(const StructureMaskSet& masks, const std::string& name) {
    const auto& m = masks.mask(name);
    BoxIndices box{{masks.dims[0], masks.dims[1], masks.dims[2]}, {-1, -1, -1}};
    std::size_t idx = 0;
    for (int z = 0; z < masks.dims[2]; ++z)
        for (int y = 0; y < masks.dims[1]; ++y)
            for (int x = 0; x < masks.dims[0]; ++x, ++idx) {
                if (!m[idx]) continue;
                box.lo[0] = std::min(box.lo[0], x);
                box.lo[1] = std::min(box.lo[1], y);
                box.lo[2] = std::min(box.lo[2], z);
                box.hi[0] = std::max(box.hi[0], x);
                box.hi[1] = std::max(box.hi[1], y);
                box.hi[2] = std::max(box.hi[2], z);
            }
    if (box.empty()) throw ConfigError("mask " + name + " is empty; no bounding box");
    return box;
}

BoxIndices head_bbox(const StructureMaskSet& masks) { return mask_bbox(masks, "HEAD"); }

namespace {

std::vector<std::int64_t> rle_encode(const std::vector<std::uint8_t>& m) {
    std::vector<std::int64_t> runs;
    std::uint8_t cur = 0;  // runs alternate starting with zeros
    std::int64_t len = 0;
    for (std::uint8_t v : m) {
        if ((v != 0) == (cur != 0)) {
            ++len;
        } else {
            runs.push_back(len);
            cur = v;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::int64_t>& runs, std::int64_t n) {
    std::vector<std::uint8_t> m;
    m.reserve(std::size_t(n));
    std::uint8_t cur = 0;
    for (std::int64_t len : runs) {
        if (len < 0) throw IoError("mask RLE: negative run length");
        m.insert(m.end(), std::size_t(len), cur);
        cur = cur ? 0 : 1;
    }
    if (std::int64_t(m.size()) != n)
        throw IoError("mask RLE: decoded " + std::to_string(m.size()) + " voxels, expected " +
                      std::to_string(n));
    return m;
}

}  // namespace

void write_masks(const StructureMaskSet& masks, const std::string& stem) {
    json doc;
    doc["dims"] = masks.dims;
    json rle = json::object();
    for (const auto& [name, m] : masks.masks) rle[name] = rle_encode(m);
    doc["rle"] = rle;
    std::ofstream js(stem + ".masks.json");
    if (!js) throw IoError("write_masks: cannot open " + stem + ".masks.json");
    js << doc.dump() << "\n";
    if (!js) throw IoError("write_masks: failed writing " + stem + ".masks.json");
}

StructureMaskSet read_masks(const std::string& stem) {
    std::ifstream js(stem + ".masks.json");
    if (!js) throw IoError("read_masks: cannot open " + stem + ".masks.json");
    json doc;
    try {
        js >> doc;
    } catch (const json::exception& e) {
        throw IoError("read_masks: bad JSON in " + stem + ".masks.json: " + e.what());
    }
    StructureMaskSet out;
    try {
        doc.at("dims").get_to(out.dims);
        const std::int64_t n = std::int64_t(out.dims[0]) * out.dims[1] * out.dims[2];
        for (const auto& [name, runs] : doc.at("rle").items())
            out.masks[name] = rle_decode(runs.get<std::vector<std::int64_t>>(), n);
    } catch (const json::exception& e) {
        throw IoError("read_masks: missing field in " + stem + ".masks.json: " + e.what());
    }
    return out;
}

}  // namespace kv2ct
