#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "nsd/geometry.hpp"
#include "nsd/io.hpp"
#include "nsd/nn.hpp"
#include "nsd/optim.hpp"

namespace nsd {

// Three axis-aligned feature planes, stored as one (3,C,H,W) tensor in
// plane order XY, XZ, YZ.
struct TriPlane {
    Tensor planes;
    std::size_t channels = 0, res = 0;

    static TriPlane zeros(std::size_t channels, std::size_t res, bool requires_grad = true);
    void save(const std::filesystem::path& path, const Manifest& extra = {}) const;
    static TriPlane load(const std::filesystem::path& path, bool requires_grad = false);
};

// Bilinear plane lookup under align-corners mapping u in [-1,1] -> [0,W-1],
// clamped outside. Differentiable in both the plane and uv.
Tensor bilinear_sample(const Tensor& plane, const Tensor& uv);

// Eq-style tri-plane feature: F_xy(x,y) + F_xz(x,z) + F_yz(y,z).
Tensor triplane_features(const Tensor& planes, const Tensor& pts);

// Shared MLP decoder: input (C + 3) -> hidden x (layers-1) -> 1, smooth
// softplus nonlinearity. The raw coordinate is appended to the summed
// feature as a positional shortcut.
class SdfDecoder {
  public:
    SdfDecoder() = default;
    // coord_shortcut appends the raw query point to the summed feature;
    // required by sphere_init (zero planes would otherwise be constant).
    SdfDecoder(std::size_t channels, std::size_t layers, std::size_t width, double beta,
               Rng& rng, bool coord_shortcut = true);

    Tensor forward(const Tensor& feats, const Tensor& pts) const;  // (N,C),(N,3) -> (N,1)

    std::size_t channels() const { return channels_; }
    bool frozen() const { return frozen_; }
    void freeze();

    ParamList params();
    void collect(const std::string& prefix, ParamList& out) const;

    void save(const std::filesystem::path& dir, const Manifest& extra = {}) const;
    static SdfDecoder load(const std::filesystem::path& dir);

    std::vector<Linear>& layers() { return layers_; }
    double beta() const { return beta_; }
    bool coord_shortcut() const { return coord_shortcut_; }

  private:
    std::vector<Linear> layers_;
    std::size_t channels_ = 0, width_ = 0;
    double beta_ = 100.0;
    bool frozen_ = false;
    bool coord_shortcut_ = true;

    friend void sphere_init(SdfDecoder&, double, Rng&);
};

struct NeuSdf {
    const TriPlane* triplane = nullptr;
    const SdfDecoder* decoder = nullptr;
};

// Batched query Phi(p) for (N,3) points in [-1,1]^3.
Tensor query_sdf(const NeuSdf& ns, const Tensor& pts);

// Any differentiable scalar field over (N,3) points -> (N,1).
using FieldFn = std::function<Tensor(const Tensor&)>;
FieldFn field_of(const NeuSdf& ns);

// Central differences per axis; the probe queries stay on the tape.
Tensor fd_gradient(const FieldFn& field, const Tensor& pts, double delta);

struct GeoLossWeights {
    double lambda1 = 100.0;
    double lambda2 = 3.0;
    double lambda3 = 1.0;
    double lambda4 = 0.5;
    double delta = 1.0 / 64.0;  // default: half a texel at H=32
};

struct SampleBatch {
    Tensor surf_pts, surf_nrm;  // (n,3)
    Tensor off_pts, off_sdf;    // (m,3), (m,1)
};

SampleBatch draw_batch(const SampleSet& set, std::size_t n_surf, std::size_t n_off, Rng& rng);
SampleBatch full_batch(const SampleSet& set);

struct GeoLoss {
    Tensor total;
    double sdf_surface = 0, sdf_offsurface = 0, normal = 0, eikonal = 0;
    double value() const { return total.item(); }
};

GeoLoss geometry_loss(const FieldFn& field, const SampleBatch& batch, const GeoLossWeights& w);

// SAL-style geometric initialization: with zero planes the field starts as
// an approximate sphere of radius r (negative at the origin, positive at
// the cube corners).
void sphere_init(SdfDecoder& decoder, double r, Rng& rng);

struct FitConfig {
    std::size_t plane_channels = 8;
    std::size_t plane_res = 32;
    std::size_t decoder_layers = 4;
    std::size_t decoder_width = 64;
    double softplus_beta = 100.0;
    GeoLossWeights weights;  // delta filled from plane_res when <= 0
    std::size_t surface_batch = 512;
    std::size_t offsurface_batch = 512;
    long joint_steps = 4000;
    long shape_steps = 2500;
    double lr_planes = 1e-2;
    double lr_decoder = 1e-4;
    double plane_clamp = 5.0;
    double plateau_rel = 1e-3;
    long plateau_window = 500;
    double sphere_init_radius = 0.5;
    std::uint64_t seed = 0;

    double fd_delta() const {
        return weights.delta > 0 ? weights.delta : 1.0 / (2.0 * double(plane_res));
    }
};

struct StepLogger {
    std::function<void(long step, const GeoLoss&)> on_step;
};

struct JointFitResult {
    SdfDecoder decoder;
    std::vector<TriPlane> triplanes;
    std::vector<double> final_losses;
    long steps_run = 0;
};

// Phase 1: shared decoder + K tri-planes on mixed batches; decoder is
// frozen on return. Aborts with NumericError on divergence.
JointFitResult fit_joint(const std::vector<const SampleSet*>& shapes, const FitConfig& cfg,
                         const StepLogger& log = {});

struct TriPlaneFitResult {
    TriPlane triplane;
    double final_loss = 0;
    long steps_run = 0;
};

// Phase 2: per-shape tri-plane against the frozen decoder. Thread-safe
// across shapes.
TriPlaneFitResult fit_triplane(const SampleSet& samples, const SdfDecoder& decoder,
                               const FitConfig& cfg, std::uint64_t shape_salt,
                               const StepLogger& log = {});

}  // namespace nsd
