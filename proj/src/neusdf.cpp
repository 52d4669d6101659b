#include "nsd/neusdf.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace nsd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TriPlane

TriPlane TriPlane::zeros(std::size_t channels, std::size_t res, bool requires_grad) {
    TriPlane t;
    t.channels = channels;
    t.res = res;
    t.planes = Tensor::zeros({3, channels, res, res}, requires_grad);
    return t;
}

void TriPlane::save(const fs::path& path, const Manifest& extra) const {
    save_nsdf(path, planes);
    Manifest m = extra;
    m.set_int("channels", (long long)channels);
    m.set_int("resolution", (long long)res);
    double lo = 0, hi = 0;
    for (double v : planes.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    m.set_double("value_min", lo);
    m.set_double("value_max", hi);
    fs::path mpath = path;
    mpath.replace_extension(".manifest.txt");
    m.save(mpath);
}

TriPlane TriPlane::load(const fs::path& path, bool requires_grad) {
    LoadedArray a = load_nsdf(path);
    if (a.shape.size() != 4 || a.shape[0] != 3 || a.shape[2] != a.shape[3]) {
        throw Error("TriPlane::load: expected (3,C,H,H), got " + shape_str(a.shape));
    }
    TriPlane t;
    t.channels = a.shape[1];
    t.res = a.shape[2];
    t.planes = Tensor::from_data(std::move(a.shape), std::move(a.data), requires_grad);
    return t;
}

// ---------------------------------------------------------------------------
// bilinear sampling

Tensor bilinear_sample(const Tensor& plane, const Tensor& uv) {
    if (plane.rank() != 3) throw Error("bilinear_sample: plane must be (C,H,W)");
    if (uv.rank() != 2 || uv.dim(1) != 2) throw Error("bilinear_sample: uv must be (N,2)");
    const std::size_t C = plane.dim(0), H = plane.dim(1), W = plane.dim(2);
    if (H < 2 || W < 2) throw Error("bilinear_sample: plane resolution must be >= 2");
    const std::size_t n = uv.dim(0);

    Tensor u = slice(uv, 1, 0, 1);
    Tensor v = slice(uv, 1, 1, 2);
    // align-corners image coordinates, clamped to the valid square
    Tensor x_img = clamp(mul_scalar(add_scalar(u, 1.0), 0.5 * double(W - 1)), 0.0,
                         double(W - 1));
    Tensor y_img = clamp(mul_scalar(add_scalar(v, 1.0), 0.5 * double(H - 1)), 0.0,
                         double(H - 1));

    // cell indices are data, not part of the graph
    std::vector<double> iu0(n), iv0(n);
    std::vector<std::size_t> cu(n), cv(n);
    for (std::size_t i = 0; i < n; ++i) {
        cu[i] = std::min<std::size_t>(W - 2, std::size_t(std::floor(x_img.data()[i])));
        cv[i] = std::min<std::size_t>(H - 2, std::size_t(std::floor(y_img.data()[i])));
        iu0[i] = double(cu[i]);
        iv0[i] = double(cv[i]);
    }
    Tensor fu = sub(x_img, Tensor::from_data({n, 1}, std::move(iu0)));
    Tensor fv = sub(y_img, Tensor::from_data({n, 1}, std::move(iv0)));
    Tensor one_minus_fu = add_scalar(neg(fu), 1.0);
    Tensor one_minus_fv = add_scalar(neg(fv), 1.0);

    // texel rows: (H*W, C)
    Tensor rows = transpose2d(reshape(plane, {C, H * W}));

    auto corner = [&](std::size_t du, std::size_t dv) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = (cv[i] + dv) * W + (cu[i] + du);
        return gather_rows(rows, idx);
    };
    auto weight = [&](const Tensor& wu, const Tensor& wv) {
        return broadcast_to(mul(wu, wv), {n, C});
    };

    Tensor out = mul(weight(one_minus_fu, one_minus_fv), corner(0, 0));
    out = add(out, mul(weight(fu, one_minus_fv), corner(1, 0)));
    out = add(out, mul(weight(one_minus_fu, fv), corner(0, 1)));
    out = add(out, mul(weight(fu, fv), corner(1, 1)));
    return out;
}

Tensor triplane_features(const Tensor& planes, const Tensor& pts) {
    if (planes.rank() != 4 || planes.dim(0) != 3) {
        throw Error("triplane_features: planes must be (3,C,H,W)");
    }
    if (pts.rank() != 2 || pts.dim(1) != 3) throw Error("triplane_features: pts must be (N,3)");
    const std::size_t C = planes.dim(1), H = planes.dim(2), W = planes.dim(3);

    Tensor x = slice(pts, 1, 0, 1);
    Tensor y = slice(pts, 1, 1, 2);
    Tensor z = slice(pts, 1, 2, 3);

    auto plane_at = [&](std::size_t i) {
        return reshape(slice(planes, 0, i, i + 1), {C, H, W});
    };
    Tensor f_xy = bilinear_sample(plane_at(0), concat({x, y}, 1));
    Tensor f_xz = bilinear_sample(plane_at(1), concat({x, z}, 1));
    Tensor f_yz = bilinear_sample(plane_at(2), concat({y, z}, 1));
    return add(add(f_xy, f_xz), f_yz);
}

// ---------------------------------------------------------------------------
// decoder

SdfDecoder::SdfDecoder(std::size_t channels, std::size_t layers, std::size_t width, double beta,
                       Rng& rng, bool coord_shortcut)
    : channels_(channels), width_(width), beta_(beta), coord_shortcut_(coord_shortcut) {
    if (layers < 2) throw Error("SdfDecoder: need at least 2 layers");
    std::size_t in = channels + (coord_shortcut_ ? 3 : 0);
    for (std::size_t l = 0; l + 1 < layers; ++l) {
        layers_.push_back(Linear::create(in, width, rng));
        in = width;
    }
    layers_.push_back(Linear::create(in, 1, rng));
}

Tensor SdfDecoder::forward(const Tensor& feats, const Tensor& pts) const {
    if (feats.dim(1) != channels_) {
        throw Error("SdfDecoder: feature width " + std::to_string(feats.dim(1)) +
                    " != channels " + std::to_string(channels_));
    }
    Tensor x = coord_shortcut_ ? concat({feats, pts}, 1) : feats;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
        x = softplus(layers_[l].forward(x), beta_);
    }
    return layers_.back().forward(x);
}

void SdfDecoder::freeze() {
    frozen_ = true;
    for (auto& l : layers_) l.set_requires_grad(false);
}

ParamList SdfDecoder::params() {
    ParamList out;
    collect("decoder", out);
    return out;
}

void SdfDecoder::collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].collect(prefix + ".l" + std::to_string(l), out);
    }
}

void SdfDecoder::save(const fs::path& dir, const Manifest& extra) const {
    Manifest m = extra;
    m.set_int("channels", (long long)channels_);
    m.set_int("layers", (long long)layers_.size());
    m.set_int("width", (long long)width_);
    m.set_double("beta", beta_);
    m.set_int("frozen", frozen_ ? 1 : 0);
    m.set_int("coord_shortcut", coord_shortcut_ ? 1 : 0);
    ParamList p;
    collect("decoder", p);
    save_checkpoint(dir, p, m);
}

SdfDecoder SdfDecoder::load(const fs::path& dir) {
    Manifest m = load_checkpoint_manifest(dir);
    Rng dummy(0);
    SdfDecoder d(std::size_t(m.get_int("channels")), std::size_t(m.get_int("layers")),
                 std::size_t(m.get_int("width")), m.get_double("beta"), dummy,
                 m.get_int("coord_shortcut") != 0);
    ParamList p = d.params();
    load_checkpoint(dir, p);
    if (m.get_int("frozen") != 0) d.freeze();
    return d;
}

// ---------------------------------------------------------------------------
// queries and losses

Tensor query_sdf(const NeuSdf& ns, const Tensor& pts) {
    if (!ns.triplane || !ns.decoder) throw Error("query_sdf: unbound NeuSdf");
    if (ns.triplane->channels != ns.decoder->channels()) {
        throw Error("query_sdf: tri-plane channels " + std::to_string(ns.triplane->channels) +
                    " != decoder channels " + std::to_string(ns.decoder->channels()));
    }
    Tensor feats = triplane_features(ns.triplane->planes, pts);
    return ns.decoder->forward(feats, pts);
}

FieldFn field_of(const NeuSdf& ns) {
    return [ns](const Tensor& pts) { return query_sdf(ns, pts); };
}

Tensor fd_gradient(const FieldFn& field, const Tensor& pts, double delta) {
    if (delta <= 0) throw Error("fd_gradient: delta must be positive");
    if (pts.rank() != 2 || pts.dim(1) != 3) throw Error("fd_gradient: pts must be (N,3)");
    const std::size_t n = pts.dim(0);
    std::vector<Tensor> comps;
    for (int axis = 0; axis < 3; ++axis) {
        std::vector<double> plus(pts.data()), minus(pts.data());
        for (std::size_t i = 0; i < n; ++i) {
            plus[3 * i + axis] = std::clamp(plus[3 * i + axis] + delta, -1.0, 1.0);
            minus[3 * i + axis] = std::clamp(minus[3 * i + axis] - delta, -1.0, 1.0);
        }
        Tensor fp = field(Tensor::from_data({n, 3}, std::move(plus)));
        Tensor fm = field(Tensor::from_data({n, 3}, std::move(minus)));
        comps.push_back(mul_scalar(sub(fp, fm), 1.0 / (2.0 * delta)));
    }
    return concat(comps, 1);
}

SampleBatch draw_batch(const SampleSet& set, std::size_t n_surf, std::size_t n_off, Rng& rng) {
    if (set.surf_pts.empty() || set.off_pts.empty()) throw Error("draw_batch: empty sample set");
    SampleBatch b;
    std::vector<double> sp, sn, op, os;
    sp.reserve(n_surf * 3);
    sn.reserve(n_surf * 3);
    for (std::size_t i = 0; i < n_surf; ++i) {
        const std::size_t k = rng.index(set.surf_pts.size());
        const Vec3 &p = set.surf_pts[k], &nm = set.surf_nrm[k];
        sp.insert(sp.end(), {p.x, p.y, p.z});
        sn.insert(sn.end(), {nm.x, nm.y, nm.z});
    }
    op.reserve(n_off * 3);
    os.reserve(n_off);
    for (std::size_t i = 0; i < n_off; ++i) {
        const std::size_t k = rng.index(set.off_pts.size());
        const Vec3& p = set.off_pts[k];
        op.insert(op.end(), {p.x, p.y, p.z});
        os.push_back(set.off_sdf[k]);
    }
    b.surf_pts = Tensor::from_data({n_surf, 3}, std::move(sp));
    b.surf_nrm = Tensor::from_data({n_surf, 3}, std::move(sn));
    b.off_pts = Tensor::from_data({n_off, 3}, std::move(op));
    b.off_sdf = Tensor::from_data({n_off, 1}, std::move(os));
    return b;
}

SampleBatch full_batch(const SampleSet& set) {
    SampleBatch b;
    std::vector<double> sp, sn, op;
    for (const auto& p : set.surf_pts) sp.insert(sp.end(), {p.x, p.y, p.z});
    for (const auto& p : set.surf_nrm) sn.insert(sn.end(), {p.x, p.y, p.z});
    for (const auto& p : set.off_pts) op.insert(op.end(), {p.x, p.y, p.z});
    b.surf_pts = Tensor::from_data({set.surf_pts.size(), 3}, std::move(sp));
    b.surf_nrm = Tensor::from_data({set.surf_nrm.size(), 3}, std::move(sn));
    b.off_pts = Tensor::from_data({set.off_pts.size(), 3}, std::move(op));
    b.off_sdf = Tensor::from_data({set.off_sdf.size(), 1}, set.off_sdf);
    return b;
}

GeoLoss geometry_loss(const FieldFn& field, const SampleBatch& batch, const GeoLossWeights& w) {
    if (!batch.surf_pts.defined() || batch.surf_pts.dim(0) == 0 || batch.off_pts.dim(0) == 0) {
        throw Error("geometry_loss: empty batch");
    }
    if (batch.off_pts.dim(0) != batch.off_sdf.dim(0) ||
        batch.surf_pts.shape() != batch.surf_nrm.shape()) {
        throw Error("geometry_loss: batch shape mismatch");
    }
    GeoLoss out;

    Tensor phi_s = field(batch.surf_pts);
    Tensor l_surf = mul_scalar(mean(abs(phi_s)), w.lambda1);

    Tensor phi_o = field(batch.off_pts);
    Tensor l_off = mul_scalar(mean(abs(sub(phi_o, batch.off_sdf))), w.lambda2);

    Tensor g = fd_gradient(field, batch.surf_pts, w.delta);
    Tensor dn = sub(g, batch.surf_nrm);
    Tensor l_normal = mul_scalar(mean(sqrt(add_scalar(rowsum(mul(dn, dn)), 1e-18))), w.lambda3);

    Tensor gn = sqrt(add_scalar(rowsum(mul(g, g)), 1e-18));
    Tensor l_eik = mul_scalar(mean(abs(add_scalar(gn, -1.0))), w.lambda4);

    out.sdf_surface = l_surf.item();
    out.sdf_offsurface = l_off.item();
    out.normal = l_normal.item();
    out.eikonal = l_eik.item();
    out.total = add(add(l_surf, l_off), add(l_normal, l_eik));
    return out;
}

// ---------------------------------------------------------------------------
// sphere init

namespace {

double probe_field(const SdfDecoder& dec, const Vec3& p) {
    NoGradGuard ng;
    Tensor feats = Tensor::zeros({1, dec.channels()});
    Tensor pts = Tensor::from_data({1, 3}, {p.x, p.y, p.z});
    return dec.forward(feats, pts).item();
}

bool sphere_init_valid(const SdfDecoder& dec) {
    if (probe_field(dec, {0, 0, 0}) >= 0) return false;
    for (int i = 0; i < 8; ++i) {
        const Vec3 c{(i & 1) ? 1.0 : -1.0, (i & 2) ? 1.0 : -1.0, (i & 4) ? 1.0 : -1.0};
        if (probe_field(dec, c) <= 0) return false;
    }
    // zero-crossing radius along a direction sweep
    const Vec3 dirs[] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},   {0, -1, 0},  {0, 0, 1},
                         {0, 0, -1}, {1, 1, 1},  {-1, 1, 1},  {1, -1, 1},  {1, 1, -1},
                         {-1, -1, 1}, {-1, 1, -1}, {1, -1, -1}, {-1, -1, -1}};
    for (Vec3 d : dirs) {
        d = d.normalized();
        if (probe_field(dec, d) <= 0) return false;  // must exit the surface by t=1
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 40; ++it) {
            const double mid = 0.5 * (lo + hi);
            (probe_field(dec, d * mid) < 0 ? lo : hi) = mid;
        }
        const double radius = 0.5 * (lo + hi);
        if (radius < 0.3 || radius > 0.9) return false;
    }
    return true;
}

}  // namespace

void sphere_init(SdfDecoder& decoder, double r, Rng& rng) {
    if (decoder.frozen()) throw Error("sphere_init: decoder is frozen");
    if (!decoder.coord_shortcut()) {
        throw Error("sphere_init: decoder needs the coordinate shortcut");
    }
    // Geometric initialization (SAL-style); a few derived attempts, then raise.
    for (int attempt = 0; attempt < 8; ++attempt) {
        Rng arng = rng.derive(std::uint64_t(attempt));
        auto& layers = decoder.layers();
        for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
            auto& lin = layers[l];
            const std::size_t out = lin.w.dim(1);
            const double std_w = std::sqrt(2.0) / std::sqrt(double(out));
            arng.fill_normal(lin.w.data(), 0.0, std_w);
            std::fill(lin.b.data().begin(), lin.b.data().end(), 0.0);
        }
        auto& last = layers.back();
        const std::size_t in = last.w.dim(0);
        const double mean_w = std::sqrt(3.14159265358979323846 / double(in));
        arng.fill_normal(last.w.data(), mean_w, 1e-5);
        std::fill(last.b.data().begin(), last.b.data().end(), -r);
        if (sphere_init_valid(decoder)) return;
    }
    throw Error("sphere_init: post-condition not met (no attempt produced a sphere-like field)");
}

// ---------------------------------------------------------------------------
// fitting

namespace {

void clamp_plane_values(TriPlane& tri, double bound) {
    for (auto& v : tri.planes.data()) v = std::clamp(v, -bound, bound);
}

struct PlateauTracker {
    std::deque<double> window;
    long window_len;
    double rel;
    PlateauTracker(long len, double rel_) : window_len(len), rel(rel_) {}

    bool update(double loss) {
        window.push_back(loss);
        if ((long)window.size() < 2 * window_len) return false;
        while ((long)window.size() > 2 * window_len) window.pop_front();
        double prev = 0, cur = 0;
        for (long i = 0; i < window_len; ++i) prev += window[i];
        for (long i = window_len; i < 2 * window_len; ++i) cur += window[i];
        prev /= double(window_len);
        cur /= double(window_len);
        return prev - cur < rel * std::fabs(prev);
    }
};

}  // namespace

JointFitResult fit_joint(const std::vector<const SampleSet*>& shapes, const FitConfig& cfg,
                         const StepLogger& log) {
    if (shapes.empty()) throw Error("fit_joint: no shapes");
    const std::size_t K = shapes.size();
    Rng root(cfg.seed);
    Rng init_rng = root.derive("decoder_init");

    JointFitResult res;
    res.decoder = SdfDecoder(cfg.plane_channels, cfg.decoder_layers, cfg.decoder_width,
                             cfg.softplus_beta, init_rng);
    Rng si_rng = root.derive("sphere_init");
    sphere_init(res.decoder, cfg.sphere_init_radius, si_rng);

    for (std::size_t k = 0; k < K; ++k) {
        res.triplanes.push_back(TriPlane::zeros(cfg.plane_channels, cfg.plane_res, true));
    }

    Adam dec_opt({.lr = cfg.lr_decoder});
    for (auto& [name, t] : res.decoder.params()) dec_opt.add_param(name, t);
    std::vector<Adam> tri_opts;
    for (std::size_t k = 0; k < K; ++k) {
        Adam a({.lr = cfg.lr_planes});
        a.add_param("triplane", res.triplanes[k].planes);
        tri_opts.push_back(std::move(a));
    }

    GeoLossWeights w = cfg.weights;
    w.delta = cfg.fd_delta();
    PlateauTracker plateau(cfg.plateau_window, cfg.plateau_rel);

    for (long step = 0; step < cfg.joint_steps; ++step) {
        const std::size_t k = std::size_t(step) % K;
        Rng srng = root.derive("joint_batch").derive(std::uint64_t(step));
        SampleBatch batch =
            draw_batch(*shapes[k], cfg.surface_batch, cfg.offsurface_batch, srng);
        NeuSdf ns{&res.triplanes[k], &res.decoder};
        GeoLoss loss = geometry_loss(field_of(ns), batch, w);
        backward(loss.total);
        dec_opt.set_lr(cosine_lr(cfg.lr_decoder, step, cfg.joint_steps));
        tri_opts[k].set_lr(cosine_lr(cfg.lr_planes, step, cfg.joint_steps));
        dec_opt.step();
        tri_opts[k].step();
        clamp_plane_values(res.triplanes[k], cfg.plane_clamp);
        res.steps_run = step + 1;
        if (log.on_step) log.on_step(step, loss);
        if (plateau.update(loss.value())) break;
    }

    res.decoder.freeze();

    // final per-shape loss on a fixed evaluation batch
    for (std::size_t k = 0; k < K; ++k) {
        Rng erng = root.derive("joint_eval").derive(std::uint64_t(k));
        SampleBatch eb = draw_batch(*shapes[k], 2048, 2048, erng);
        NoGradGuard ng;
        NeuSdf ns{&res.triplanes[k], &res.decoder};
        res.final_losses.push_back(geometry_loss(field_of(ns), eb, w).value());
    }
    return res;
}

TriPlaneFitResult fit_triplane(const SampleSet& samples, const SdfDecoder& decoder,
                               const FitConfig& cfg, std::uint64_t shape_salt,
                               const StepLogger& log) {
    if (!decoder.frozen()) throw Error("fit_triplane: decoder must be frozen");
    Rng root = Rng(cfg.seed).derive("triplane_fit").derive(shape_salt);

    TriPlaneFitResult res;
    res.triplane = TriPlane::zeros(cfg.plane_channels, cfg.plane_res, true);
    Adam opt({.lr = cfg.lr_planes});
    opt.add_param("triplane", res.triplane.planes);

    GeoLossWeights w = cfg.weights;
    w.delta = cfg.fd_delta();
    PlateauTracker plateau(cfg.plateau_window, cfg.plateau_rel);

    for (long step = 0; step < cfg.shape_steps; ++step) {
        Rng srng = root.derive("batch").derive(std::uint64_t(step));
        SampleBatch batch = draw_batch(samples, cfg.surface_batch, cfg.offsurface_batch, srng);
        NeuSdf ns{&res.triplane, &decoder};
        GeoLoss loss = geometry_loss(field_of(ns), batch, w);
        backward(loss.total);
        opt.set_lr(cosine_lr(cfg.lr_planes, step, cfg.shape_steps));
        opt.step();
        clamp_plane_values(res.triplane, cfg.plane_clamp);
        res.steps_run = step + 1;
        if (log.on_step) log.on_step(step, loss);
        if (plateau.update(loss.value())) break;
    }

    Rng erng = root.derive("eval");
    SampleBatch eb = draw_batch(samples, 2048, 2048, erng);
    NoGradGuard ng;
    NeuSdf ns{&res.triplane, &decoder};
    res.final_loss = geometry_loss(field_of(ns), eb, w).value();
    return res;
}

}  // namespace nsd
