#include "nsd/diffusion.hpp"

#include <cmath>

namespace nsd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// schedule

NoiseSchedule NoiseSchedule::linear(long T, double beta_min, double beta_max) {
    if (T < 1) throw Error("NoiseSchedule: T must be >= 1");
    if (!(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0)) {
        throw Error("NoiseSchedule: need 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.beta_tilde.resize(T);
    double prod = 1.0;
    for (long t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : double(t) / double(T - 1);
        s.beta[t] = beta_min + (beta_max - beta_min) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        const double prev = prod;
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
        // beta_tilde_1 = 0 with the alpha_bar_0 := 1 convention
        s.beta_tilde[t] = (1.0 - (t == 0 ? 1.0 : s.alpha_bar[t - 1])) / (1.0 - prod) * s.beta[t];
        (void)prev;
    }
    return s;
}

double NoiseSchedule::beta_at(long t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range");
    return beta[t - 1];
}

double NoiseSchedule::alpha_at(long t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range");
    return alpha[t - 1];
}

double NoiseSchedule::alpha_bar_at(long t) const {
    if (t < 0 || t > T) throw Error("schedule: t out of range");
    return t == 0 ? 1.0 : alpha_bar[t - 1];
}

double NoiseSchedule::beta_tilde_at(long t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range");
    return beta_tilde[t - 1];
}

void NoiseSchedule::validate_training() const {
    for (long t = 1; t < T; ++t) {
        if (!(beta[t - 1] < beta[t])) throw Error("schedule: beta must increase");
        if (!(alpha_bar[t] < alpha_bar[t - 1])) throw Error("schedule: alpha_bar must decrease");
    }
    if (!(alpha_bar[T - 1] < 0.01)) {
        throw Error("schedule: alpha_bar_T = " + std::to_string(alpha_bar[T - 1]) +
                    " not small enough for training");
    }
}

Tensor q_sample(const Tensor& z0, long t, const Tensor& eps, const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape()) throw Error("q_sample: eps shape mismatch");
    if (t < 1 || t > sched.T) throw Error("q_sample: t out of range");
    const double ab = sched.alpha_bar_at(t);
    return add(mul_scalar(z0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
}

// ---------------------------------------------------------------------------
// denoiser

namespace {

// standard sinusoidal embedding of the timestep
std::vector<double> time_embedding(long t, std::size_t dim, long T) {
    std::vector<double> e(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e[i] = std::sin(double(t) * freq);
        e[half + i] = std::cos(double(t) * freq);
    }
    if (dim % 2) e[dim - 1] = double(t) / double(T);
    return e;
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.width % cfg_.heads != 0) throw Error("Denoiser: width must divide by heads");
    Rng r = rng.derive("denoiser");
    proj_in_ = Linear::create(cfg_.channels, cfg_.width, r);
    time_mlp1_ = Linear::create(cfg_.width, cfg_.width, r);
    time_mlp2_ = Linear::create(cfg_.width, cfg_.width, r, std::sqrt(1.0 / double(cfg_.width)));
    sape_ = Sape::create(cfg_.width, cfg_.res * cfg_.res, r);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        Block blk;
        blk.ln1 = LayerNorm::create(cfg_.width);
        blk.ln2 = LayerNorm::create(cfg_.width);
        blk.attn = MultiHeadLinearAttention::create(cfg_.width, cfg_.heads, r);
        blk.ffn = FeedForward::create(cfg_.width, cfg_.width * cfg_.ffn_mult, r);
        if (cfg_.conditional) {
            blk.ln_cross = LayerNorm::create(cfg_.width);
            blk.cross = CrossAttention::create(cfg_.width, cfg_.cond_dim, r);
        }
        blocks_.push_back(std::move(blk));
    }
    ln_out_ = LayerNorm::create(cfg_.width);
    proj_out_ = Linear::create(cfg_.width, cfg_.channels, r,
                               0.1 * std::sqrt(1.0 / double(cfg_.width)));
}

Tensor Denoiser::forward(const Tensor& z_t, long t, const Tensor& condition) const {
    if (z_t.rank() != 4 || z_t.dim(0) != 3 || z_t.dim(1) != cfg_.channels ||
        z_t.dim(2) != cfg_.res || z_t.dim(3) != cfg_.res) {
        throw Error("denoiser: latent " + shape_str(z_t.shape()) + " does not match config");
    }
    if (condition.defined()) {
        if (!cfg_.conditional) throw Error("denoiser: condition passed to unconditional model");
        if (condition.rank() != 2 || condition.dim(1) != cfg_.cond_dim) {
            throw Error("denoiser: condition width mismatch");
        }
    } else if (cfg_.conditional) {
        throw Error("denoiser: conditional model needs a condition (use the zero mask)");
    }

    const std::size_t n = cfg_.tokens();
    Tensor x = proj_in_.forward(tokenize(z_t));  // (n, width)
    if (cfg_.sape) x = sape_.add_to_tokens(x);

    Tensor temb = Tensor::from_data({1, cfg_.width}, time_embedding(t, cfg_.width, cfg_.T));
    temb = time_mlp2_.forward(softplus(time_mlp1_.forward(temb), 1.0));
    x = add(x, broadcast_to(temb, {n, cfg_.width}));

    for (const auto& blk : blocks_) {
        x = add(x, blk.attn.forward(blk.ln1.forward(x)));
        if (cfg_.conditional) {
            x = add(x, blk.cross.forward(blk.ln_cross.forward(x), condition));
        }
        x = add(x, blk.ffn.forward(blk.ln2.forward(x)));
    }
    Tensor out_tokens = proj_out_.forward(ln_out_.forward(x));
    return untokenize(out_tokens, cfg_.channels, cfg_.res, cfg_.res);
}

ParamList Denoiser::params() {
    ParamList out;
    collect("denoiser", out);
    return out;
}

void Denoiser::collect(const std::string& prefix, ParamList& out) const {
    proj_in_.collect(prefix + ".proj_in", out);
    time_mlp1_.collect(prefix + ".time1", out);
    time_mlp2_.collect(prefix + ".time2", out);
    if (cfg_.sape) sape_.collect(prefix + ".sape", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string p = prefix + ".block" + std::to_string(b);
        blocks_[b].ln1.collect(p + ".ln1", out);
        blocks_[b].ln2.collect(p + ".ln2", out);
        blocks_[b].attn.collect(p + ".attn", out);
        blocks_[b].ffn.collect(p + ".ffn", out);
        if (cfg_.conditional) {
            blocks_[b].ln_cross.collect(p + ".ln_cross", out);
            blocks_[b].cross.collect(p + ".cross", out);
        }
    }
    ln_out_.collect(prefix + ".ln_out", out);
    proj_out_.collect(prefix + ".proj_out", out);
}

void Denoiser::save(const fs::path& dir, const Manifest& extra) const {
    Manifest m = extra;
    m.set_int("channels", (long long)cfg_.channels);
    m.set_int("res", (long long)cfg_.res);
    m.set_int("width", (long long)cfg_.width);
    m.set_int("blocks", (long long)cfg_.blocks);
    m.set_int("heads", (long long)cfg_.heads);
    m.set_int("ffn_mult", (long long)cfg_.ffn_mult);
    m.set_int("sape", cfg_.sape ? 1 : 0);
    m.set_int("conditional", cfg_.conditional ? 1 : 0);
    m.set_int("cond_dim", (long long)cfg_.cond_dim);
    m.set_int("T", cfg_.T);
    ParamList p;
    collect("denoiser", p);
    save_checkpoint(dir, p, m);
}

Denoiser Denoiser::load(const fs::path& dir) {
    Manifest m = load_checkpoint_manifest(dir);
    DenoiserConfig cfg;
    cfg.channels = std::size_t(m.get_int("channels"));
    cfg.res = std::size_t(m.get_int("res"));
    cfg.width = std::size_t(m.get_int("width"));
    cfg.blocks = std::size_t(m.get_int("blocks"));
    cfg.heads = std::size_t(m.get_int("heads"));
    cfg.ffn_mult = std::size_t(m.get_int("ffn_mult"));
    cfg.sape = m.get_int("sape") != 0;
    cfg.conditional = m.get_int("conditional") != 0;
    cfg.cond_dim = std::size_t(m.get_int("cond_dim"));
    cfg.T = m.get_int("T");
    Rng dummy(0);
    Denoiser d(cfg, dummy);
    ParamList p = d.params();
    load_checkpoint(dir, p);
    return d;
}

// ---------------------------------------------------------------------------
// losses and sampling

Tensor ldm_loss(const DenoiseFn& psi, const Tensor& z0, long t, const Tensor& eps,
                const NoiseSchedule& sched, const Tensor& condition) {
    Tensor z_t = q_sample(z0, t, eps, sched);
    Tensor pred = psi(z_t, t, condition);
    Tensor diff = sub(pred, z0);
    return mean(mul(diff, diff));
}

Tensor ldm_loss(const Denoiser& psi, const Tensor& z0, long t, const Tensor& eps,
                const NoiseSchedule& sched, const Tensor& condition) {
    return ldm_loss(
        [&psi](const Tensor& z_t, long t_, const Tensor& c) { return psi.forward(z_t, t_, c); },
        z0, t, eps, sched, condition);
}

Tensor cfg_combine(const Tensor& pred_cond, const Tensor& pred_uncond, double scale) {
    if (pred_cond.shape() != pred_uncond.shape()) throw Error("cfg_combine: shape mismatch");
    return add(pred_uncond, mul_scalar(sub(pred_cond, pred_uncond), scale));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& pred_z0, long t, long t_next,
                 const NoiseSchedule& sched) {
    if (t_next >= t) throw Error("ddim_step: t_next must be below t");
    if (z_t.shape() != pred_z0.shape()) throw Error("ddim_step: shape mismatch");
    const double ab_t = sched.alpha_bar_at(t);
    const double ab_n = sched.alpha_bar_at(t_next);
    // eps_hat = (z_t - sqrt(ab_t) z0) / sqrt(1 - ab_t)
    Tensor eps_hat = mul_scalar(sub(z_t, mul_scalar(pred_z0, std::sqrt(ab_t))),
                                1.0 / std::sqrt(1.0 - ab_t));
    return add(mul_scalar(pred_z0, std::sqrt(ab_n)),
               mul_scalar(eps_hat, std::sqrt(1.0 - ab_n)));
}

std::vector<long> ddim_time_grid(long T, int steps) {
    if (steps < 1 || steps > T) throw Error("ddim_time_grid: need 1 <= steps <= T");
    std::vector<long> grid(steps);
    for (int i = 0; i < steps; ++i) {
        grid[i] = (long)std::llround(double(T) * double(steps - i) / double(steps));
        if (grid[i] < 1) grid[i] = 1;
    }
    for (int i = 1; i < steps; ++i) {
        if (grid[i] >= grid[i - 1]) grid[i] = grid[i - 1] - 1;  // keep strictly decreasing
    }
    if (grid.back() < 1) throw Error("ddim_time_grid: grid collapsed");
    return grid;
}

Tensor sample(const DenoiseFn& predict_fn, const Shape& latent_shape,
              const NoiseSchedule& sched, const SampleOptions& opt, Rng& rng,
              const Tensor& condition) {
    NoGradGuard ng;
    std::vector<double> noise(shape_numel(latent_shape));
    rng.fill_normal(noise);
    Tensor z = Tensor::from_data(latent_shape, std::move(noise));

    auto predict = [&](const Tensor& z_t, long t) { return predict_fn(z_t, t, condition); };

    if (opt.ancestral) {
        // DDPM posterior: z_{t-1} = mu_tilde(z_t, pred) + sqrt(beta_tilde) xi
        for (long t = sched.T; t >= 1; --t) {
            Tensor pred = predict(z, t);
            const double ab_t = sched.alpha_bar_at(t);
            const double ab_p = sched.alpha_bar_at(t - 1);
            const double bt = sched.beta_at(t);
            const double c0 = std::sqrt(ab_p) * bt / (1.0 - ab_t);
            const double ct = std::sqrt(sched.alpha_at(t)) * (1.0 - ab_p) / (1.0 - ab_t);
            Tensor mu = add(mul_scalar(pred, c0), mul_scalar(z, ct));
            if (t > 1) {
                std::vector<double> xi(z.numel());
                rng.fill_normal(xi);
                Tensor noise_t = Tensor::from_data(z.shape(), std::move(xi));
                z = add(mu, mul_scalar(noise_t, std::sqrt(sched.beta_tilde_at(t))));
            } else {
                z = mu;
            }
            for (double x : z.data()) {
                if (!std::isfinite(x)) {
                    throw NumericError("sample: non-finite value at t=" + std::to_string(t));
                }
            }
        }
        return z;
    }

    std::vector<long> grid = ddim_time_grid(sched.T, opt.steps);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const long t = grid[i];
        const long t_next = i + 1 < grid.size() ? grid[i + 1] : 0;
        Tensor pred = predict(z, t);
        z = ddim_step(z, pred, t, t_next, sched);
        for (double x : z.data()) {
            if (!std::isfinite(x)) {
                throw NumericError("sample: non-finite value at step " + std::to_string(i));
            }
        }
    }
    return z;
}

Tensor sample(const Denoiser& psi, const NoiseSchedule& sched, const SampleOptions& opt,
              Rng& rng, const Tensor& condition) {
    const auto& cfg = psi.config();
    const bool guided = cfg.conditional && condition.defined() && opt.guidance != 1.0;
    DenoiseFn predict = [&psi, &cfg, guided, &opt](const Tensor& z_t, long t,
                                                   const Tensor& cond) {
        if (!cfg.conditional) return psi.forward(z_t, t);
        Tensor c = cond.defined() ? cond : null_condition(cfg.cond_dim);
        Tensor pred = psi.forward(z_t, t, c);
        if (guided) {
            Tensor pred_un = psi.forward(z_t, t, null_condition(cfg.cond_dim));
            pred = cfg_combine(pred, pred_un, opt.guidance);
        }
        return pred;
    };
    return sample(predict, {3, cfg.channels, cfg.res, cfg.res}, sched, opt, rng, condition);
}

// ---------------------------------------------------------------------------
// condition encoders

PointCloudEncoder::PointCloudEncoder(std::size_t cond_dim, std::size_t hidden, Rng& rng) {
    l1_ = Linear::create(3, hidden, rng);
    l2_ = Linear::create(hidden, hidden, rng);
    head_ = Linear::create(hidden, cond_dim, rng);
}

Tensor PointCloudEncoder::encode(const Tensor& points) const {
    if (points.rank() != 2 || points.dim(1) != 3 || points.dim(0) == 0) {
        throw Error("PointCloudEncoder: non-empty (N,3) cloud required");
    }
    Tensor h = softplus(l1_.forward(points), 1.0);
    h = softplus(l2_.forward(h), 1.0);
    Tensor pooled = rows_max(h);  // (1, hidden), permutation invariant
    return head_.forward(pooled);
}

ParamList PointCloudEncoder::params() {
    ParamList out;
    collect("point_encoder", out);
    return out;
}

void PointCloudEncoder::collect(const std::string& prefix, ParamList& out) const {
    l1_.collect(prefix + ".l1", out);
    l2_.collect(prefix + ".l2", out);
    head_.collect(prefix + ".head", out);
}

LabelEmbedding::LabelEmbedding(const std::vector<std::string>& vocab, std::size_t cond_dim,
                               Rng& rng)
    : vocab_(vocab) {
    if (vocab_.empty()) throw Error("LabelEmbedding: empty vocabulary");
    table_ = Tensor::randn({vocab_.size(), cond_dim}, rng, 0.5, true);
}

Tensor LabelEmbedding::encode(const std::string& label) const {
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        if (vocab_[i] == label) return gather_rows(table_, {i});
    }
    throw Error("LabelEmbedding: unknown label '" + label + "'");
}

ParamList LabelEmbedding::params() {
    ParamList out;
    collect("label_embedding", out);
    return out;
}

void LabelEmbedding::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".table", table_);
}

// ---------------------------------------------------------------------------
// training

bool cfg_drop_decision(std::uint64_t seed, long step, double drop_prob) {
    Rng r = Rng(seed).derive("cfg_drop").derive(std::uint64_t(step));
    return r.bernoulli(drop_prob);
}

void train_diffusion(Denoiser& psi, const std::vector<DiffusionTrainItem>& data,
                     const NoiseSchedule& sched, const DiffusionTrainConfig& cfg, Adam& opt,
                     long start_step, const DiffusionTrainHooks& hooks) {
    if (data.empty()) throw Error("train_diffusion: no data");
    sched.validate_training();
    Rng root(cfg.seed);
    const bool conditional = psi.config().conditional;
    for (long step = start_step; step < cfg.steps; ++step) {
        Rng srng = root.derive("step").derive(std::uint64_t(step));
        const auto& item = data[srng.index(data.size())];
        const long t = 1 + long(srng.index(std::size_t(sched.T)));
        std::vector<double> noise(item.latent.numel());
        srng.fill_normal(noise);
        Tensor eps = Tensor::from_data(item.latent.shape(), std::move(noise));

        Tensor cond;
        if (conditional) {
            const bool drop = cfg_drop_decision(cfg.seed, step, cfg.cond_drop_prob);
            cond = (drop || !item.condition) ? null_condition(psi.config().cond_dim)
                                             : item.condition();
        }
        Tensor loss = ldm_loss(psi, item.latent, t, eps, sched, cond);
        backward(loss);
        opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
        opt.step();
        if (hooks.on_step) hooks.on_step(step, loss.item());
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            opt.quantize_f32();
            if (hooks.on_checkpoint) hooks.on_checkpoint(step + 1, opt);
        }
    }
}

}  // namespace nsd
