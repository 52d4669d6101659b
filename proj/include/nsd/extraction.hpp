#pragma once

#include <filesystem>
#include <functional>

#include "nsd/mesh.hpp"
#include "nsd/neusdf.hpp"

namespace nsd {

extern const int kMcEdgeTable[256];
extern const int kMcTriTable[256][16];

// Scalar samples on the R^3 vertex lattice covering [-1,1]^3,
// values[(iz*R + iy)*R + ix], x fastest.
struct SdfGrid {
    std::size_t res = 0;
    std::vector<double> values;

    double spacing() const { return 2.0 / double(res - 1); }
    Vec3 vertex(std::size_t ix, std::size_t iy, std::size_t iz) const {
        const double h = spacing();
        return {-1.0 + h * double(ix), -1.0 + h * double(iy), -1.0 + h * double(iz)};
    }
    double at(std::size_t ix, std::size_t iy, std::size_t iz) const {
        return values[(iz * res + iy) * res + ix];
    }

    // Trilinear interpolation at an arbitrary point (clamped to the box).
    double interpolate(const Vec3& p) const;

    void save(const std::filesystem::path& path) const;
    static SdfGrid load(const std::filesystem::path& path);
};

// Batched field evaluator: (N,3) points -> N values, no tape.
using BatchField = std::function<std::vector<double>(const std::vector<double>& pts)>;

BatchField batch_field_of(const NeuSdf& ns);

// Evaluates the field over the lattice in z-slabs, optionally in parallel.
// Memory capped by max_bytes (R^3 doubles must fit).
SdfGrid field_to_grid(const BatchField& field, std::size_t res, std::size_t workers = 1,
                      std::size_t max_bytes = std::size_t(2) << 30);

SdfGrid triplane_to_grid(const NeuSdf& ns, std::size_t res, std::size_t workers = 1,
                         std::size_t max_bytes = std::size_t(2) << 30);

// Standard 256-case table extraction at the given isovalue with linear edge
// interpolation and welded vertices. Faces wind so normals point toward
// positive values. Empty output when the isovalue is never crossed.
TriangleMesh marching_cubes(const SdfGrid& grid, double iso = 0.0);

}  // namespace nsd
