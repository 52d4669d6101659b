#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nsd/mesh.hpp"
#include "nsd/rng.hpp"
#include "nsd/vec3.hpp"

namespace nsd {

enum class ShapeKind {
    Sphere,        // params: r
    Box,           // params: hx, hy, hz
    Torus,         // params: major R, minor r (axis y)
    Capsule,       // params: half length h (axis y), radius r
    Union,
    SmoothUnion,   // params: blend k
    Difference,    // child 0 minus the rest
    Intersection,
};

std::string shape_kind_name(ShapeKind k);
ShapeKind shape_kind_from_name(const std::string& s);

// CSG tree with a rigid pose + uniform scale per node. Leaves are
// primitives in canonical frame; composites require >= 2 children.
struct PrimitiveShape {
    ShapeKind kind = ShapeKind::Sphere;
    std::array<double, 3> params{0.5, 0, 0};
    std::vector<PrimitiveShape> children;
    Mat3 rot;                 // local-to-world rotation
    Vec3 translation{0, 0, 0};
    double scale = 1.0;

    bool is_leaf() const { return children.empty(); }
    void validate() const;

    std::string to_json() const;
    static PrimitiveShape from_json(const std::string& text);
    void save_json(const std::filesystem::path& path) const;
    static PrimitiveShape load_json(const std::filesystem::path& path);
};

// Exact for leaves; a valid bound for min/max composites (exact off the
// blend region). Negative inside.
double analytic_sdf(const PrimitiveShape& shape, const Vec3& p);

// Central differences on the oracle, delta=1e-5, normalized. nullopt when
// the gradient vanishes (CSG edge/corner) and the caller should resample.
std::optional<Vec3> try_analytic_normal(const PrimitiveShape& shape, const Vec3& p,
                                        double delta = 1e-5);
Vec3 analytic_normal(const PrimitiveShape& shape, const Vec3& p);  // throws on zero gradient

// Conservative world-space bounds of the shape.
void shape_bounds(const PrimitiveShape& shape, Vec3& lo, Vec3& hi);

// Rescales/translates (root pose) so bounds fit in [-margin, margin]^3.
void normalize_shape(PrimitiveShape& shape, double margin = 0.8);

struct SampleSet {
    std::vector<Vec3> surf_pts;
    std::vector<Vec3> surf_nrm;
    std::vector<Vec3> off_pts;
    std::vector<double> off_sdf;

    void save(const std::filesystem::path& dir) const;
    static SampleSet load(const std::filesystem::path& dir);
};

struct SurfaceSamplerConfig {
    double shell = 0.08;       // candidate band |sdf| < shell before projection
    double tol = 1e-5;         // projection convergence target
    double accept_tol = 1e-4;  // acceptance bound on |sdf|
    int max_iters = 10;
    double max_fail_frac = 0.01;
};

// Shell rejection + Newton projection p <- p - phi(p) grad(p).
std::vector<SurfaceSample> sample_surface(const PrimitiveShape& shape, std::size_t n, Rng& rng,
                                          const SurfaceSamplerConfig& cfg = {});

struct OffSurfaceSample {
    Vec3 point;
    double sdf;
};
std::vector<OffSurfaceSample> sample_offsurface(const PrimitiveShape& shape, std::size_t n,
                                                Rng& rng);

SampleSet make_sample_set(const PrimitiveShape& shape, std::size_t n_surface,
                          std::size_t n_offsurface, Rng& rng);

// Procedural corpus: per-class generators over seeded parameter ranges.
inline const std::vector<std::string>& corpus_classes() {
    static const std::vector<std::string> k{"chair", "table", "blob"};
    return k;
}
PrimitiveShape make_corpus_shape(const std::string& cls, Rng& rng);

// mesh_sdf companion that validates watertightness once.
class MeshSdfOracle {
  public:
    explicit MeshSdfOracle(TriangleMesh mesh);
    double operator()(const Vec3& p) const;
    const TriangleMesh& mesh() const { return mesh_; }

  private:
    TriangleMesh mesh_;
};

}  // namespace nsd
