#include "nsd/mesh.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "nsd/common.hpp"

namespace nsd {

namespace fs = std::filesystem;

double TriangleMesh::total_area() const {
    double a = 0;
    for (std::size_t f = 0; f < faces.size(); ++f) a += 0.5 * face_normal(f).norm();
    return a;
}

Vec3 TriangleMesh::face_normal(std::size_t f) const {
    const auto& t = faces[f];
    const Vec3 &a = vertices[t[0]], &b = vertices[t[1]], &c = vertices[t[2]];
    return (b - a).cross(c - a);
}

void export_obj(const TriangleMesh& mesh, const fs::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("export_obj: cannot open " + path.string());
    char buf[128];
    for (const auto& v : mesh.vertices) {
        std::snprintf(buf, sizeof buf, "v %.6f %.6f %.6f\n", v.x, v.y, v.z);
        os << buf;
    }
    for (const auto& f : mesh.faces) {
        os << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
    }
    if (!os) throw Error("export_obj: write failed for " + path.string());
}

TriangleMesh import_obj(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("import_obj: cannot open " + path.string());
    TriangleMesh mesh;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x >> v.y >> v.z)) {
                throw Error("import_obj: malformed vertex at line " + std::to_string(lineno));
            }
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::vector<long> idx;
            std::string chunk;
            while (ls >> chunk) {
                // accept "i", "i/j", "i/j/k"; only the vertex index is used
                idx.push_back(std::strtol(chunk.c_str(), nullptr, 10));
            }
            if (idx.size() != 3) {
                throw Error("import_obj: face with " + std::to_string(idx.size()) +
                            " vertices at line " + std::to_string(lineno) +
                            " (triangles required)");
            }
            std::array<std::uint32_t, 3> f{};
            for (int i = 0; i < 3; ++i) {
                long v = idx[i];
                if (v < 0) v = long(mesh.vertices.size()) + v + 1;  // negative = relative
                if (v < 1) {
                    throw Error("import_obj: bad index at line " + std::to_string(lineno));
                }
                f[i] = std::uint32_t(v - 1);
            }
            mesh.faces.push_back(f);
        }
        // other records (vn, vt, o, g, usemtl...) ignored
    }
    for (const auto& f : mesh.faces) {
        for (auto v : f) {
            if (v >= mesh.vertices.size()) {
                throw Error("import_obj: face index out of range in " + path.string());
            }
        }
    }
    return mesh;
}

namespace {
std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) {
    return (std::uint64_t(std::min(a, b)) << 32) | std::uint64_t(std::max(a, b));
}
}  // namespace

bool is_watertight(const TriangleMesh& mesh) {
    if (mesh.faces.empty()) return false;
    // value: (count, direction balance); closed 2-manifold needs count==2, balance==0
    std::unordered_map<std::uint64_t, std::pair<int, int>> edges;
    edges.reserve(mesh.faces.size() * 3);
    for (const auto& f : mesh.faces) {
        for (int i = 0; i < 3; ++i) {
            const std::uint32_t a = f[i], b = f[(i + 1) % 3];
            if (a == b) return false;
            auto& e = edges[edge_key(a, b)];
            e.first += 1;
            e.second += (a < b) ? 1 : -1;
        }
    }
    for (const auto& [k, v] : edges) {
        if (v.first != 2 || v.second != 0) return false;
    }
    return true;
}

long euler_characteristic(const TriangleMesh& mesh) {
    std::unordered_map<std::uint64_t, int> edges;
    for (const auto& f : mesh.faces) {
        for (int i = 0; i < 3; ++i) edges[edge_key(f[i], f[(i + 1) % 3])] = 1;
    }
    return long(mesh.vertices.size()) - long(edges.size()) + long(mesh.faces.size());
}

TriangleMesh cleaned(const TriangleMesh& mesh, double area_eps) {
    TriangleMesh out;
    out.vertices = mesh.vertices;
    for (const auto& f : mesh.faces) {
        for (auto v : f) {
            if (v >= mesh.vertices.size()) throw Error("cleaned: face index out of range");
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
        const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]])
                           .cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
        if (0.5 * n.norm() <= area_eps) continue;
        out.faces.push_back(f);
    }
    return out;
}

std::vector<SurfaceSample> sample_mesh_surface(const TriangleMesh& mesh, std::size_t n,
                                               Rng& rng) {
    if (mesh.faces.empty()) throw Error("sample_mesh_surface: empty mesh");
    std::vector<double> cdf(mesh.faces.size());
    double total = 0;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        total += 0.5 * mesh.face_normal(f).norm();
        cdf[f] = total;
    }
    if (total <= 0) throw Error("sample_mesh_surface: zero total area");

    std::vector<SurfaceSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform() * total;
        const std::size_t f =
            std::size_t(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const auto& t = mesh.faces[std::min(f, mesh.faces.size() - 1)];
        const Vec3 &a = mesh.vertices[t[0]], &b = mesh.vertices[t[1]], &c = mesh.vertices[t[2]];
        double r1 = std::sqrt(rng.uniform());
        double r2 = rng.uniform();
        const Vec3 p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
        out.push_back({p, (b - a).cross(c - a).normalized()});
    }
    return out;
}

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    // Ericson, Real-Time Collision Detection, closest point on triangle.
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return (p - a).norm();

    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return (p - b).norm();

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) {
        const double v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }

    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return (p - c).norm();

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) {
        const double w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }

    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return (p - (a + ab * v + ac * w)).norm();
}

double winding_number(const TriangleMesh& mesh, const Vec3& p) {
    // van Oosterom & Strackee signed solid angles.
    double total = 0;
    for (const auto& f : mesh.faces) {
        const Vec3 a = mesh.vertices[f[0]] - p;
        const Vec3 b = mesh.vertices[f[1]] - p;
        const Vec3 c = mesh.vertices[f[2]] - p;
        const double la = a.norm(), lb = b.norm(), lc = c.norm();
        const double det = a.dot(b.cross(c));
        const double denom = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
        total += 2.0 * std::atan2(det, denom);
    }
    return total / (4.0 * 3.14159265358979323846);
}

double mesh_sdf(const TriangleMesh& mesh, const Vec3& p) {
    if (!is_watertight(mesh)) throw Error("mesh_sdf: mesh is not watertight");
    double best = 1e300;
    for (const auto& f : mesh.faces) {
        best = std::min(best, point_triangle_distance(p, mesh.vertices[f[0]],
                                                      mesh.vertices[f[1]], mesh.vertices[f[2]]));
    }
    return winding_number(mesh, p) > 0.5 ? -best : best;
}

}  // namespace nsd
