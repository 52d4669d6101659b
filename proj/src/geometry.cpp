#include "nsd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "nsd/common.hpp"
#include "nsd/io.hpp"

namespace nsd {

namespace fs = std::filesystem;
using nlohmann::json;

std::string shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Box: return "box";
        case ShapeKind::Torus: return "torus";
        case ShapeKind::Capsule: return "capsule";
        case ShapeKind::Union: return "union";
        case ShapeKind::SmoothUnion: return "smooth_union";
        case ShapeKind::Difference: return "difference";
        case ShapeKind::Intersection: return "intersection";
    }
    throw Error("shape_kind_name: bad kind");
}

ShapeKind shape_kind_from_name(const std::string& s) {
    if (s == "sphere") return ShapeKind::Sphere;
    if (s == "box") return ShapeKind::Box;
    if (s == "torus") return ShapeKind::Torus;
    if (s == "capsule") return ShapeKind::Capsule;
    if (s == "union") return ShapeKind::Union;
    if (s == "smooth_union") return ShapeKind::SmoothUnion;
    if (s == "difference") return ShapeKind::Difference;
    if (s == "intersection") return ShapeKind::Intersection;
    throw Error("unknown shape kind '" + s + "'");
}

void PrimitiveShape::validate() const {
    const bool composite = kind == ShapeKind::Union || kind == ShapeKind::SmoothUnion ||
                           kind == ShapeKind::Difference || kind == ShapeKind::Intersection;
    if (composite && children.size() < 2) {
        throw Error("composite shape needs >= 2 children");
    }
    if (!composite && !children.empty()) {
        throw Error("leaf shape cannot have children");
    }
    if (scale <= 0) throw Error("shape scale must be positive");
    for (const auto& c : children) c.validate();
}

namespace {

double sd_sphere(const Vec3& p, double r) { return p.norm() - r; }

double sd_box(const Vec3& p, const Vec3& h) {
    const Vec3 q{std::fabs(p.x) - h.x, std::fabs(p.y) - h.y, std::fabs(p.z) - h.z};
    const Vec3 qp{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
    return qp.norm() + std::min(std::max(q.x, std::max(q.y, q.z)), 0.0);
}

double sd_torus(const Vec3& p, double R, double r) {
    const double qx = std::sqrt(p.x * p.x + p.z * p.z) - R;
    return std::sqrt(qx * qx + p.y * p.y) - r;
}

double sd_capsule(const Vec3& p, double h, double r) {
    const double y = p.y - std::clamp(p.y, -h, h);
    return std::sqrt(p.x * p.x + y * y + p.z * p.z) - r;
}

double smooth_min(double a, double b, double k) {
    const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
    return b * (1.0 - h) + a * h - k * h * (1.0 - h);
}

}  // namespace

double analytic_sdf(const PrimitiveShape& s, const Vec3& p_world) {
    const Vec3 p = s.rot.transposed() * (p_world - s.translation) / s.scale;
    double d;
    switch (s.kind) {
        case ShapeKind::Sphere:
            d = sd_sphere(p, s.params[0]);
            break;
        case ShapeKind::Box:
            d = sd_box(p, {s.params[0], s.params[1], s.params[2]});
            break;
        case ShapeKind::Torus:
            d = sd_torus(p, s.params[0], s.params[1]);
            break;
        case ShapeKind::Capsule:
            d = sd_capsule(p, s.params[0], s.params[1]);
            break;
        case ShapeKind::Union: {
            d = analytic_sdf(s.children[0], p);
            for (std::size_t i = 1; i < s.children.size(); ++i)
                d = std::min(d, analytic_sdf(s.children[i], p));
            break;
        }
        case ShapeKind::SmoothUnion: {
            const double k = s.params[0] > 0 ? s.params[0] : 0.05;
            d = analytic_sdf(s.children[0], p);
            for (std::size_t i = 1; i < s.children.size(); ++i)
                d = smooth_min(d, analytic_sdf(s.children[i], p), k);
            break;
        }
        case ShapeKind::Difference: {
            d = analytic_sdf(s.children[0], p);
            for (std::size_t i = 1; i < s.children.size(); ++i)
                d = std::max(d, -analytic_sdf(s.children[i], p));
            break;
        }
        case ShapeKind::Intersection: {
            d = analytic_sdf(s.children[0], p);
            for (std::size_t i = 1; i < s.children.size(); ++i)
                d = std::max(d, analytic_sdf(s.children[i], p));
            break;
        }
        default:
            throw Error("analytic_sdf: bad kind");
    }
    return d * s.scale;
}

std::optional<Vec3> try_analytic_normal(const PrimitiveShape& shape, const Vec3& p,
                                        double delta) {
    const Vec3 g{
        (analytic_sdf(shape, {p.x + delta, p.y, p.z}) -
         analytic_sdf(shape, {p.x - delta, p.y, p.z})) /
            (2 * delta),
        (analytic_sdf(shape, {p.x, p.y + delta, p.z}) -
         analytic_sdf(shape, {p.x, p.y - delta, p.z})) /
            (2 * delta),
        (analytic_sdf(shape, {p.x, p.y, p.z + delta}) -
         analytic_sdf(shape, {p.x, p.y, p.z - delta})) /
            (2 * delta)};
    const double n = g.norm();
    if (n < 1e-4) return std::nullopt;
    return g / n;
}

Vec3 analytic_normal(const PrimitiveShape& shape, const Vec3& p) {
    auto n = try_analytic_normal(shape, p);
    if (!n) throw Error("analytic_normal: vanishing gradient (resample)");
    return *n;
}

namespace {

void leaf_bounds(const PrimitiveShape& s, Vec3& lo, Vec3& hi) {
    switch (s.kind) {
        case ShapeKind::Sphere:
            lo = {-s.params[0], -s.params[0], -s.params[0]};
            hi = {s.params[0], s.params[0], s.params[0]};
            break;
        case ShapeKind::Box:
            lo = {-s.params[0], -s.params[1], -s.params[2]};
            hi = {s.params[0], s.params[1], s.params[2]};
            break;
        case ShapeKind::Torus: {
            const double e = s.params[0] + s.params[1];
            lo = {-e, -s.params[1], -e};
            hi = {e, s.params[1], e};
            break;
        }
        case ShapeKind::Capsule: {
            const double e = s.params[0] + s.params[1];
            lo = {-s.params[1], -e, -s.params[1]};
            hi = {s.params[1], e, s.params[1]};
            break;
        }
        default:
            throw Error("leaf_bounds on composite");
    }
}

void transform_bounds(const PrimitiveShape& s, Vec3& lo, Vec3& hi) {
    // conservative: transform the 8 corners, take min/max
    Vec3 nlo{1e300, 1e300, 1e300}, nhi{-1e300, -1e300, -1e300};
    for (int i = 0; i < 8; ++i) {
        const Vec3 c{(i & 1) ? hi.x : lo.x, (i & 2) ? hi.y : lo.y, (i & 4) ? hi.z : lo.z};
        const Vec3 w = s.rot * (c * s.scale) + s.translation;
        nlo = {std::min(nlo.x, w.x), std::min(nlo.y, w.y), std::min(nlo.z, w.z)};
        nhi = {std::max(nhi.x, w.x), std::max(nhi.y, w.y), std::max(nhi.z, w.z)};
    }
    lo = nlo;
    hi = nhi;
}

}  // namespace

void shape_bounds(const PrimitiveShape& s, Vec3& lo, Vec3& hi) {
    if (s.is_leaf()) {
        leaf_bounds(s, lo, hi);
    } else {
        lo = {1e300, 1e300, 1e300};
        hi = {-1e300, -1e300, -1e300};
        // blend can overshoot children by at most k; pad below
        double pad = s.kind == ShapeKind::SmoothUnion ? (s.params[0] > 0 ? s.params[0] : 0.05)
                                                      : 0.0;
        for (const auto& c : s.children) {
            Vec3 clo, chi;
            shape_bounds(c, clo, chi);
            lo = {std::min(lo.x, clo.x), std::min(lo.y, clo.y), std::min(lo.z, clo.z)};
            hi = {std::max(hi.x, chi.x), std::max(hi.y, chi.y), std::max(hi.z, chi.z)};
        }
        lo = lo - Vec3{pad, pad, pad};
        hi = hi + Vec3{pad, pad, pad};
    }
    transform_bounds(s, lo, hi);
}

void normalize_shape(PrimitiveShape& shape, double margin) {
    Vec3 lo, hi;
    shape_bounds(shape, lo, hi);
    const Vec3 center = (lo + hi) * 0.5;
    const double half = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}) * 0.5;
    if (half <= 0) throw Error("normalize_shape: degenerate bounds");
    const double s = margin / half;
    // wrap: new root transform applied after the existing one
    shape.translation = (shape.translation - center) * s;
    shape.scale *= s;
    // rot unchanged (note translation must be rotated? translation is applied
    // after rot in our convention, so scaling it is enough)
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

json shape_to_json(const PrimitiveShape& s) {
    json j;
    j["kind"] = shape_kind_name(s.kind);
    j["params"] = {s.params[0], s.params[1], s.params[2]};
    j["rot"] = std::vector<double>(s.rot.m.begin(), s.rot.m.end());
    j["translation"] = {s.translation.x, s.translation.y, s.translation.z};
    j["scale"] = s.scale;
    if (!s.children.empty()) {
        j["children"] = json::array();
        for (const auto& c : s.children) j["children"].push_back(shape_to_json(c));
    }
    return j;
}

PrimitiveShape shape_from_json(const json& j) {
    PrimitiveShape s;
    s.kind = shape_kind_from_name(j.at("kind").get<std::string>());
    const auto p = j.at("params").get<std::vector<double>>();
    for (std::size_t i = 0; i < std::min<std::size_t>(3, p.size()); ++i) s.params[i] = p[i];
    const auto r = j.at("rot").get<std::vector<double>>();
    if (r.size() != 9) throw Error("shape json: rot must have 9 entries");
    std::copy(r.begin(), r.end(), s.rot.m.begin());
    const auto t = j.at("translation").get<std::vector<double>>();
    s.translation = {t.at(0), t.at(1), t.at(2)};
    s.scale = j.at("scale").get<double>();
    if (j.contains("children")) {
        for (const auto& c : j.at("children")) s.children.push_back(shape_from_json(c));
    }
    return s;
}

}  // namespace

std::string PrimitiveShape::to_json() const { return shape_to_json(*this).dump(2); }

PrimitiveShape PrimitiveShape::from_json(const std::string& text) {
    PrimitiveShape s = shape_from_json(json::parse(text));
    s.validate();
    return s;
}

void PrimitiveShape::save_json(const fs::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("save_json: cannot open " + path.string());
    os << to_json() << "\n";
}

PrimitiveShape PrimitiveShape::load_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("load_json: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), {});
    return from_json(text);
}

// ---------------------------------------------------------------------------
// sampling

std::vector<SurfaceSample> sample_surface(const PrimitiveShape& shape, std::size_t n, Rng& rng,
                                          const SurfaceSamplerConfig& cfg) {
    if (n < 1) throw Error("sample_surface: n must be >= 1");
    std::vector<SurfaceSample> out;
    out.reserve(n);
    std::size_t projected = 0, failed = 0;
    std::size_t guard = 0;
    const std::size_t guard_max = 20000u * std::max<std::size_t>(n, 1);
    while (out.size() < n) {
        if (++guard > guard_max) {
            throw Error("sample_surface: candidate generation stalled");
        }
        Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        double d = analytic_sdf(shape, p);
        if (std::fabs(d) > cfg.shell) continue;
        ++projected;
        bool ok = false;
        for (int it = 0; it < cfg.max_iters; ++it) {
            if (std::fabs(d) < cfg.tol) {
                ok = true;
                break;
            }
            // p <- p - phi * grad; grad normalized by |grad|^2 so blend
            // regions (|grad| < 1) still take full Newton steps
            const double h = 1e-5;
            const Vec3 g{(analytic_sdf(shape, {p.x + h, p.y, p.z}) -
                          analytic_sdf(shape, {p.x - h, p.y, p.z})) /
                             (2 * h),
                         (analytic_sdf(shape, {p.x, p.y + h, p.z}) -
                          analytic_sdf(shape, {p.x, p.y - h, p.z})) /
                             (2 * h),
                         (analytic_sdf(shape, {p.x, p.y, p.z + h}) -
                          analytic_sdf(shape, {p.x, p.y, p.z - h})) /
                             (2 * h)};
            const double gn2 = g.norm2();
            if (gn2 < 1e-8) break;  // degenerate gradient: resample
            p = p - g * (d / gn2);
            d = analytic_sdf(shape, p);
        }
        if (!ok && std::fabs(d) < cfg.accept_tol) ok = true;
        auto nrm = ok ? try_analytic_normal(shape, p) : std::nullopt;
        if (!ok || !nrm || std::fabs(p.x) > 1 || std::fabs(p.y) > 1 || std::fabs(p.z) > 1) {
            ++failed;
            if (projected >= 2000 && double(failed) / double(projected) > cfg.max_fail_frac) {
                throw Error("sample_surface: projection failure rate above " +
                            std::to_string(cfg.max_fail_frac));
            }
            continue;
        }
        out.push_back({p, *nrm});
    }
    if (projected > 0 && double(failed) / double(projected) > cfg.max_fail_frac) {
        throw Error("sample_surface: projection failure rate above " +
                    std::to_string(cfg.max_fail_frac));
    }
    return out;
}

std::vector<OffSurfaceSample> sample_offsurface(const PrimitiveShape& shape, std::size_t n,
                                                Rng& rng) {
    if (n < 1) throw Error("sample_offsurface: n must be >= 1");
    std::vector<OffSurfaceSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        out.push_back({p, analytic_sdf(shape, p)});
    }
    return out;
}

SampleSet make_sample_set(const PrimitiveShape& shape, std::size_t n_surface,
                          std::size_t n_offsurface, Rng& rng) {
    SampleSet set;
    Rng surf_rng = rng.derive("surface");
    Rng off_rng = rng.derive("offsurface");
    auto surf = sample_surface(shape, n_surface, surf_rng);
    for (const auto& s : surf) {
        set.surf_pts.push_back(s.point);
        set.surf_nrm.push_back(s.normal);
    }
    auto off = sample_offsurface(shape, n_offsurface, off_rng);
    for (const auto& s : off) {
        set.off_pts.push_back(s.point);
        set.off_sdf.push_back(s.sdf);
    }
    return set;
}

namespace {

std::vector<double> flatten(const std::vector<Vec3>& v) {
    std::vector<double> out;
    out.reserve(v.size() * 3);
    for (const auto& p : v) {
        out.push_back(p.x);
        out.push_back(p.y);
        out.push_back(p.z);
    }
    return out;
}

std::vector<Vec3> unflatten(const LoadedArray& a, const char* what) {
    if (a.shape.size() != 2 || a.shape[1] != 3) {
        throw Error(std::string("sample set: ") + what + " must be (N,3)");
    }
    std::vector<Vec3> out(a.shape[0]);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = {a.data[3 * i], a.data[3 * i + 1], a.data[3 * i + 2]};
    }
    return out;
}

}  // namespace

void SampleSet::save(const fs::path& dir) const {
    fs::create_directories(dir);
    save_nsdf(dir / "surf_pts.nsdf", {surf_pts.size(), 3}, flatten(surf_pts));
    save_nsdf(dir / "surf_nrm.nsdf", {surf_nrm.size(), 3}, flatten(surf_nrm));
    save_nsdf(dir / "off_pts.nsdf", {off_pts.size(), 3}, flatten(off_pts));
    save_nsdf(dir / "off_sdf.nsdf", {off_sdf.size()}, off_sdf);
    Manifest m;
    m.set_int("n_surface", (long long)surf_pts.size());
    m.set_int("n_offsurface", (long long)off_pts.size());
    m.save(dir / "manifest.txt");
}

SampleSet SampleSet::load(const fs::path& dir) {
    SampleSet s;
    s.surf_pts = unflatten(load_nsdf(dir / "surf_pts.nsdf"), "surf_pts");
    s.surf_nrm = unflatten(load_nsdf(dir / "surf_nrm.nsdf"), "surf_nrm");
    s.off_pts = unflatten(load_nsdf(dir / "off_pts.nsdf"), "off_pts");
    auto d = load_nsdf(dir / "off_sdf.nsdf");
    s.off_sdf = std::move(d.data);
    if (s.surf_pts.size() != s.surf_nrm.size() || s.off_pts.size() != s.off_sdf.size()) {
        throw Error("sample set: inconsistent array lengths in " + dir.string());
    }
    return s;
}

// ---------------------------------------------------------------------------
// procedural corpus

namespace {

PrimitiveShape leaf(ShapeKind k, std::array<double, 3> params, Vec3 t = {0, 0, 0},
                    Mat3 r = Mat3::identity(), double scale = 1.0) {
    PrimitiveShape s;
    s.kind = k;
    s.params = params;
    s.translation = t;
    s.rot = r;
    s.scale = scale;
    return s;
}

PrimitiveShape make_chair(Rng& rng) {
    // seat + backrest + 4 legs
    const double sw = rng.uniform(0.30, 0.45);   // seat half width
    const double sd = rng.uniform(0.28, 0.42);   // seat half depth
    const double st = rng.uniform(0.035, 0.06);  // seat half thickness
    const double lh = rng.uniform(0.25, 0.40);   // leg half height
    const double lr = rng.uniform(0.035, 0.055); // leg radius
    const double bh = rng.uniform(0.30, 0.50);   // backrest half height
    const double bt = rng.uniform(0.035, 0.055); // backrest half thickness

    PrimitiveShape root;
    root.kind = ShapeKind::Union;
    root.children.push_back(leaf(ShapeKind::Box, {sw, st, sd}, {0, 0, 0}));
    const double lx = sw - lr * 1.5, lz = sd - lr * 1.5;
    for (int i = 0; i < 4; ++i) {
        const double x = (i & 1) ? lx : -lx;
        const double z = (i & 2) ? lz : -lz;
        root.children.push_back(leaf(ShapeKind::Capsule, {lh, lr, 0}, {x, -st - lh, z}));
    }
    root.children.push_back(leaf(ShapeKind::Box, {sw, bh, bt}, {0, st + bh, -sd + bt}));
    normalize_shape(root);
    return root;
}

PrimitiveShape make_table(Rng& rng) {
    const double tw = rng.uniform(0.45, 0.65);
    const double td = rng.uniform(0.30, 0.55);
    const double tt = rng.uniform(0.035, 0.055);
    const double lh = rng.uniform(0.30, 0.45);
    const double lr = rng.uniform(0.04, 0.06);
    const bool box_legs = rng.bernoulli(0.5);

    PrimitiveShape root;
    root.kind = ShapeKind::Union;
    root.children.push_back(leaf(ShapeKind::Box, {tw, tt, td}, {0, 0, 0}));
    const double lx = tw - lr * 2, lz = td - lr * 2;
    for (int i = 0; i < 4; ++i) {
        const double x = (i & 1) ? lx : -lx;
        const double z = (i & 2) ? lz : -lz;
        if (box_legs) {
            root.children.push_back(leaf(ShapeKind::Box, {lr, lh, lr}, {x, -tt - lh, z}));
        } else {
            root.children.push_back(leaf(ShapeKind::Capsule, {lh, lr, 0}, {x, -tt - lh, z}));
        }
    }
    if (rng.bernoulli(0.4)) {  // stretcher bar
        root.children.push_back(
            leaf(ShapeKind::Box, {tw - lr * 2, lr, lr}, {0, -tt - 2 * lh * 0.7, 0}));
    }
    normalize_shape(root);
    return root;
}

PrimitiveShape make_blob(Rng& rng) {
    PrimitiveShape root;
    root.kind = ShapeKind::SmoothUnion;
    root.params = {0.05, 0, 0};
    const int parts = 3 + int(rng.index(4));  // 3..6
    for (int i = 0; i < parts; ++i) {
        const Vec3 t{rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35),
                     rng.uniform(-0.35, 0.35)};
        const Mat3 r = Mat3::euler(rng.uniform(0, 6.28), rng.uniform(0, 6.28),
                                   rng.uniform(0, 6.28));
        switch (rng.index(3)) {
            case 0:
                root.children.push_back(leaf(ShapeKind::Sphere, {rng.uniform(0.12, 0.3), 0, 0}, t));
                break;
            case 1:
                root.children.push_back(leaf(
                    ShapeKind::Box,
                    {rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25)},
                    t, r));
                break;
            default:
                root.children.push_back(leaf(
                    ShapeKind::Torus, {rng.uniform(0.15, 0.3), rng.uniform(0.06, 0.12), 0}, t,
                    r));
                break;
        }
    }
    normalize_shape(root);
    return root;
}

}  // namespace

PrimitiveShape make_corpus_shape(const std::string& cls, Rng& rng) {
    if (cls == "chair") return make_chair(rng);
    if (cls == "table") return make_table(rng);
    if (cls == "blob") return make_blob(rng);
    throw Error("make_corpus_shape: unknown class '" + cls + "'");
}

MeshSdfOracle::MeshSdfOracle(TriangleMesh mesh) : mesh_(std::move(mesh)) {
    if (!is_watertight(mesh_)) throw Error("MeshSdfOracle: mesh is not watertight");
}

double MeshSdfOracle::operator()(const Vec3& p) const {
    double best = 1e300;
    for (const auto& f : mesh_.faces) {
        best = std::min(best, point_triangle_distance(p, mesh_.vertices[f[0]],
                                                      mesh_.vertices[f[1]],
                                                      mesh_.vertices[f[2]]));
    }
    return winding_number(mesh_, p) > 0.5 ? -best : best;
}

}  // namespace nsd
