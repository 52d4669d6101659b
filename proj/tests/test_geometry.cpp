#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "nsd/geometry.hpp"
#include "nsd/mesh.hpp"

using namespace nsd;
namespace fs = std::filesystem;

namespace {

PrimitiveShape sphere(double r) {
    PrimitiveShape s;
    s.kind = ShapeKind::Sphere;
    s.params = {r, 0, 0};
    return s;
}

PrimitiveShape box(double hx, double hy, double hz) {
    PrimitiveShape s;
    s.kind = ShapeKind::Box;
    s.params = {hx, hy, hz};
    return s;
}

PrimitiveShape torus(double R, double r) {
    PrimitiveShape s;
    s.kind = ShapeKind::Torus;
    s.params = {R, r, 0};
    return s;
}

// 12-triangle cube with outward winding, half extent h.
TriangleMesh cube_mesh(double h) {
    TriangleMesh m;
    for (int i = 0; i < 8; ++i) {
        m.vertices.push_back({(i & 1) ? h : -h, (i & 2) ? h : -h, (i & 4) ? h : -h});
    }
    auto quad = [&](int a, int b, int c, int d) {
        m.faces.push_back({std::uint32_t(a), std::uint32_t(b), std::uint32_t(c)});
        m.faces.push_back({std::uint32_t(a), std::uint32_t(c), std::uint32_t(d)});
    };
    quad(0, 2, 3, 1);  // -z
    quad(4, 5, 7, 6);  // +z
    quad(0, 1, 5, 4);  // -y
    quad(2, 6, 7, 3);  // +y
    quad(0, 4, 6, 2);  // -x
    quad(1, 3, 7, 5);  // +x
    return m;
}

fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "nsd_geom_test";
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("sphere sdf basics") {
    auto s = sphere(0.5);
    CHECK(analytic_sdf(s, {0, 0, 0}) == doctest::Approx(-0.5));
    CHECK(analytic_sdf(s, {0.5, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(analytic_sdf(s, {1, 0, 0}) == doctest::Approx(0.5));
}

TEST_CASE("box sdf: face, edge, corner") {
    auto b = box(0.3, 0.3, 0.3);
    CHECK(analytic_sdf(b, {0.6, 0, 0}) == doctest::Approx(0.3));
    // corner direction: distance to corner (0.3,0.3,0.3)
    const double d = analytic_sdf(b, {0.6, 0.6, 0.6});
    CHECK(d == doctest::Approx(std::sqrt(3 * 0.3 * 0.3)));
    CHECK(analytic_sdf(b, {0, 0, 0}) == doctest::Approx(-0.3));
}

TEST_CASE("transformed sdf stays a distance") {
    PrimitiveShape s = sphere(0.4);
    s.translation = {0.2, -0.1, 0.3};
    s.rot = Mat3::euler(0.3, 1.1, -0.7);
    s.scale = 0.8;
    const Vec3 c = s.translation;
    CHECK(analytic_sdf(s, c) == doctest::Approx(-0.32));  // scaled radius
    CHECK(analytic_sdf(s, c + Vec3{0.32, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("csg composites") {
    PrimitiveShape u;
    u.kind = ShapeKind::Union;
    u.children.push_back(sphere(0.3));
    auto s2 = sphere(0.3);
    s2.translation = {0.5, 0, 0};
    u.children.push_back(s2);
    CHECK(analytic_sdf(u, {0.5, 0, 0}) == doctest::Approx(-0.3));
    CHECK(analytic_sdf(u, {0, 0, 0}) == doctest::Approx(-0.3));

    PrimitiveShape d;
    d.kind = ShapeKind::Difference;
    d.children.push_back(sphere(0.5));
    d.children.push_back(sphere(0.25));
    // center is inside the subtracted sphere -> outside the difference
    CHECK(analytic_sdf(d, {0, 0, 0}) == doctest::Approx(0.25));
    CHECK(analytic_sdf(d, {0.375, 0, 0}) == doctest::Approx(-0.125));

    PrimitiveShape i;
    i.kind = ShapeKind::Intersection;
    i.children.push_back(box(0.4, 0.4, 0.4));
    i.children.push_back(sphere(0.4));
    CHECK(analytic_sdf(i, {0, 0, 0}) == doctest::Approx(-0.4));
    CHECK(analytic_sdf(i, {0.39, 0.39, 0.39}) > 0);  // corner cut off by the sphere

    PrimitiveShape sm;
    sm.kind = ShapeKind::SmoothUnion;
    sm.params = {0.05, 0, 0};
    sm.children.push_back(sphere(0.3));
    sm.children.push_back(s2);
    // far from the blend region the smooth union equals the union
    CHECK(analytic_sdf(sm, {1, 1, 1}) == doctest::Approx(analytic_sdf(u, {1, 1, 1})));
}

TEST_CASE("analytic normals") {
    auto s = sphere(0.5);
    Vec3 n = analytic_normal(s, {0.5, 0, 0});
    CHECK(n.x == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::fabs(n.y) < 1e-6);

    auto b = box(0.3, 0.2, 0.25);
    Vec3 nb = analytic_normal(b, {0.3, 0, 0});
    CHECK(nb.x == doctest::Approx(1.0).epsilon(1e-6));

    // torus normal vs closed form
    auto t = torus(0.4, 0.15);
    Rng rng(5);
    for (int i = 0; i < 32; ++i) {
        const double a = rng.uniform(0, 6.283), b2 = rng.uniform(0, 6.283);
        const Vec3 ring{0.4 * std::cos(a), 0, 0.4 * std::sin(a)};
        const Vec3 p{(0.4 + 0.15 * std::cos(b2)) * std::cos(a), 0.15 * std::sin(b2),
                     (0.4 + 0.15 * std::cos(b2)) * std::sin(a)};
        const Vec3 expect = (p - ring).normalized();
        const Vec3 got = analytic_normal(t, p);
        CHECK((got - expect).norm() < 1e-4);
    }
}

TEST_CASE("surface sampling: sphere radii exact to 1e-4") {
    auto s = sphere(0.5);
    Rng rng(11);
    auto pts = sample_surface(s, 1000, rng);
    REQUIRE(pts.size() == 1000);
    for (const auto& q : pts) {
        CHECK(std::fabs(q.point.norm() - 0.5) < 1e-4);
        CHECK(std::fabs(q.normal.norm() - 1.0) < 1e-6);
    }
}

TEST_CASE("surface sampling: box face counts proportional to areas") {
    // box with unequal faces: areas x:y:z pairs = (hy*hz):(hx*hz):(hx*hy)
    const double hx = 0.55, hy = 0.35, hz = 0.45;
    auto b = box(hx, hy, hz);
    Rng rng(13);
    const std::size_t n = 20000;
    auto pts = sample_surface(b, n, rng);
    std::map<int, int> face_counts;  // 0:+x 1:-x 2:+y 3:-y 4:+z 5:-z
    for (const auto& q : pts) {
        const Vec3& p = q.point;
        const double dx = hx - std::fabs(p.x), dy = hy - std::fabs(p.y),
                     dz = hz - std::fabs(p.z);
        if (dx <= dy && dx <= dz) {
            face_counts[p.x > 0 ? 0 : 1]++;
        } else if (dy <= dz) {
            face_counts[p.y > 0 ? 2 : 3]++;
        } else {
            face_counts[p.z > 0 ? 4 : 5]++;
        }
    }
    const double areas[6] = {hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy};
    double total_area = 0;
    for (double a : areas) total_area += a;
    for (int f = 0; f < 6; ++f) {
        const double pfrac = areas[f] / total_area;
        const double sigma = std::sqrt(pfrac * (1 - pfrac) * double(n));
        CHECK(std::fabs(double(face_counts[f]) - pfrac * double(n)) < 3.5 * sigma + 40);
    }
}

TEST_CASE("mesh surface sampling lies on triangle planes") {
    auto m = cube_mesh(0.5);
    Rng rng(17);
    auto pts = sample_mesh_surface(m, 500, rng);
    for (const auto& q : pts) {
        const double d = std::max({std::fabs(q.point.x), std::fabs(q.point.y),
                                   std::fabs(q.point.z)});
        CHECK(d == doctest::Approx(0.5).epsilon(1e-9));
    }
}

TEST_CASE("off-surface sampling: uniformity and exact distances") {
    auto s = sphere(0.5);
    Rng rng(19);
    const std::size_t n = 20000;
    auto pts = sample_offsurface(s, n, rng);
    Vec3 mean{0, 0, 0};
    std::size_t inside = 0;
    for (const auto& q : pts) {
        mean += q.point;
        CHECK(q.sdf == q.point.norm() - 0.5);  // exact by construction
        if (q.sdf < 0) ++inside;
    }
    mean = mean / double(n);
    const double bound = 4.0 / std::sqrt(12.0 * double(n));
    CHECK(std::fabs(mean.x) < bound);
    CHECK(std::fabs(mean.y) < bound);
    CHECK(std::fabs(mean.z) < bound);

    // Monte-Carlo volume: sphere volume fraction of the [-1,1]^3 box
    const double pfrac = (4.0 / 3.0) * 3.14159265358979 * 0.125 / 8.0;
    const double sigma = std::sqrt(pfrac * (1 - pfrac) / double(n));
    CHECK(std::fabs(double(inside) / double(n) - pfrac) < 3 * sigma);
}

TEST_CASE("mesh_sdf on cube") {
    auto m = cube_mesh(0.5);
    CHECK(mesh_sdf(m, {0, 0, 0}) == doctest::Approx(-0.5));
    CHECK(mesh_sdf(m, {0.5, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(mesh_sdf(m, {0.9, 0.9, 0.9}) == doctest::Approx(std::sqrt(3) * 0.4));

    TriangleMesh open_mesh = m;
    open_mesh.faces.pop_back();
    CHECK_THROWS_AS(mesh_sdf(open_mesh, {0, 0, 0}), Error);
}

TEST_CASE("analytic vs mesh sdf agree on a cube") {
    auto b = box(0.5, 0.5, 0.5);
    auto m = cube_mesh(0.5);
    MeshSdfOracle oracle(m);
    Rng rng(23);
    for (int i = 0; i < 2000; ++i) {
        const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        CHECK(std::fabs(analytic_sdf(b, p) - oracle(p)) < 2e-3);
    }
}

TEST_CASE("eikonal property of leaf oracles") {
    Rng rng(29);
    auto check_unit_grad = [&](const PrimitiveShape& s,
                               const std::function<bool(const Vec3&)>& skip) {
        int tested = 0;
        while (tested < 200) {
            const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
            if (skip(p)) continue;
            const double delta = 1e-5;
            const Vec3 g{(analytic_sdf(s, {p.x + delta, p.y, p.z}) -
                          analytic_sdf(s, {p.x - delta, p.y, p.z})) /
                             (2 * delta),
                         (analytic_sdf(s, {p.x, p.y + delta, p.z}) -
                          analytic_sdf(s, {p.x, p.y - delta, p.z})) /
                             (2 * delta),
                         (analytic_sdf(s, {p.x, p.y, p.z + delta}) -
                          analytic_sdf(s, {p.x, p.y, p.z - delta})) /
                             (2 * delta)};
            CHECK(std::fabs(g.norm() - 1.0) < 1e-3);
            ++tested;
        }
    };
    check_unit_grad(sphere(0.5), [](const Vec3& p) { return p.norm() < 0.05; });
    const double hx = 0.4, hy = 0.3, hz = 0.35;
    check_unit_grad(box(hx, hy, hz), [&](const Vec3& p) {
        // skip near the interior medial set and the surface-adjacent band
        const double qx = std::fabs(p.x) - hx, qy = std::fabs(p.y) - hy,
                     qz = std::fabs(p.z) - hz;
        if (std::max({qx, qy, qz}) < 1e-3 && std::max({qx, qy, qz}) > -1e-3) return true;
        if (qx < 0 && qy < 0 && qz < 0) {
            double a[3] = {qx, qy, qz};
            std::sort(a, a + 3);
            return a[2] - a[1] < 1e-3;  // tie between two faces
        }
        // outside: gradient is C0 across region boundaries, no skip needed
        return false;
    });
    check_unit_grad(torus(0.4, 0.15), [](const Vec3& p) {
        const double ring = std::fabs(std::sqrt(p.x * p.x + p.z * p.z) - 0.4);
        return ring * ring + p.y * p.y < 0.01 * 0.01 ||
               std::sqrt(p.x * p.x + p.z * p.z) < 0.05;
    });
}

TEST_CASE("normalization fits shapes inside the unit box") {
    Rng rng(31);
    for (const auto& cls : corpus_classes()) {
        for (int i = 0; i < 8; ++i) {
            Rng shape_rng = rng.derive(cls).derive(std::uint64_t(i));
            auto s = make_corpus_shape(cls, shape_rng);
            s.validate();
            Vec3 lo, hi;
            shape_bounds(s, lo, hi);
            CHECK(lo.x >= -1.0);
            CHECK(lo.y >= -1.0);
            CHECK(lo.z >= -1.0);
            CHECK(hi.x <= 1.0);
            CHECK(hi.y <= 1.0);
            CHECK(hi.z <= 1.0);
            // and the shape is non-trivial
            CHECK(hi.x - lo.x > 0.5);
        }
    }
}

TEST_CASE("corpus shapes support sampling") {
    Rng rng(37);
    for (const auto& cls : corpus_classes()) {
        Rng shape_rng = rng.derive(cls);
        auto s = make_corpus_shape(cls, shape_rng);
        Rng sample_rng = rng.derive("samples").derive(cls);
        auto set = make_sample_set(s, 500, 500, sample_rng);
        CHECK(set.surf_pts.size() == 500);
        CHECK(set.off_pts.size() == 500);
        for (std::size_t i = 0; i < set.surf_pts.size(); ++i) {
            CHECK(std::fabs(analytic_sdf(s, set.surf_pts[i])) < 1e-4);
        }
    }
}

TEST_CASE("sample set persistence and determinism") {
    auto s = sphere(0.5);
    auto dir1 = tmpdir() / "set1";
    auto dir2 = tmpdir() / "set2";
    {
        Rng rng(41);
        make_sample_set(s, 200, 200, rng).save(dir1);
    }
    {
        Rng rng(41);
        make_sample_set(s, 200, 200, rng).save(dir2);
    }
    for (const char* f : {"surf_pts.nsdf", "surf_nrm.nsdf", "off_pts.nsdf", "off_sdf.nsdf"}) {
        std::ifstream a(dir1 / f, std::ios::binary), b(dir2 / f, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b)), {});
        CHECK(sa == sb);
        CHECK(!sa.empty());
    }
    SampleSet loaded = SampleSet::load(dir1);
    CHECK(loaded.surf_pts.size() == 200);
    CHECK(loaded.off_sdf.size() == 200);
}

TEST_CASE("obj round trip") {
    auto m = cube_mesh(0.5);
    auto path = tmpdir() / "cube.obj";
    export_obj(m, path);
    TriangleMesh r = import_obj(path);
    REQUIRE(r.vertex_count() == m.vertex_count());
    REQUIRE(r.face_count() == m.face_count());
    for (std::size_t i = 0; i < m.faces.size(); ++i) CHECK(r.faces[i] == m.faces[i]);
    for (std::size_t i = 0; i < m.vertices.size(); ++i) {
        CHECK(std::fabs(r.vertices[i].x - m.vertices[i].x) < 1e-6);
    }
    CHECK(is_watertight(r));
    CHECK(euler_characteristic(r) == 2);
}

TEST_CASE("obj single triangle format") {
    TriangleMesh t;
    t.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    t.faces = {{0, 1, 2}};
    auto path = tmpdir() / "tri.obj";
    export_obj(t, path);
    std::ifstream is(path);
    std::string l1, l2, l3, l4;
    std::getline(is, l1);
    std::getline(is, l2);
    std::getline(is, l3);
    std::getline(is, l4);
    CHECK(l1.substr(0, 2) == "v ");
    CHECK(l4 == "f 1 2 3");
}

TEST_CASE("obj malformed face names the line") {
    auto path = tmpdir() / "bad.obj";
    std::ofstream(path) << "v 0 0 0\nv 1 0 0\nf 1 2\n";
    try {
        import_obj(path);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("shape json round trip") {
    Rng rng(43);
    auto s = make_corpus_shape("chair", rng);
    auto s2 = PrimitiveShape::from_json(s.to_json());
    Rng probe(44);
    for (int i = 0; i < 100; ++i) {
        const Vec3 p{probe.uniform(-1, 1), probe.uniform(-1, 1), probe.uniform(-1, 1)};
        CHECK(analytic_sdf(s, p) == doctest::Approx(analytic_sdf(s2, p)).epsilon(1e-12));
    }
}
