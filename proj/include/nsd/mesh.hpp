#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "nsd/rng.hpp"
#include "nsd/vec3.hpp"

namespace nsd {

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> faces;

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t face_count() const { return faces.size(); }
    bool empty() const { return faces.empty(); }

    double total_area() const;
    Vec3 face_normal(std::size_t f) const;  // unnormalized (2x area vector)
};

// ASCII OBJ, v/f records only, 1-based indices, triangles only.
void export_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
TriangleMesh import_obj(const std::filesystem::path& path);

// Every undirected edge shared by exactly two faces, opposite directions.
bool is_watertight(const TriangleMesh& mesh);

// V - E + F over the undirected edge set.
long euler_characteristic(const TriangleMesh& mesh);

// Drops zero-area faces and faces with repeated indices; checks index range.
TriangleMesh cleaned(const TriangleMesh& mesh, double area_eps = 1e-12);

struct SurfaceSample {
    Vec3 point;
    Vec3 normal;
};

// Area-weighted uniform surface sampling; normals from face winding.
std::vector<SurfaceSample> sample_mesh_surface(const TriangleMesh& mesh, std::size_t n, Rng& rng);

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Generalized winding number (1 inside, 0 outside for watertight meshes).
double winding_number(const TriangleMesh& mesh, const Vec3& p);

// Unsigned min distance with winding-number sign; requires watertightness.
double mesh_sdf(const TriangleMesh& mesh, const Vec3& p);

}  // namespace nsd
