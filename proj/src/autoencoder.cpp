#include "nsd/autoencoder.hpp"

#include <cmath>

namespace nsd {

namespace fs = std::filesystem;

Tensor group_downsample(const Tensor& tri, const Tensor& weights, const Tensor& bias,
                        std::size_t stride, std::size_t pad) {
    if (tri.rank() != 4 || tri.dim(0) != 3) throw Error("group_downsample: tri must be (3,C,H,W)");
    if (weights.rank() != 5 || weights.dim(0) != 3) {
        throw Error("group_downsample: weights must be (3,Cout,Cin,kh,kw)");
    }
    if (bias.rank() != 2 || bias.dim(0) != 3 || bias.dim(1) != weights.dim(1)) {
        throw Error("group_downsample: bias must be (3,Cout)");
    }
    const std::size_t cin = tri.dim(1), h = tri.dim(2), w = tri.dim(3);
    if (weights.dim(2) != cin) throw Error("group_downsample: channel mismatch");
    if (stride == 2 && (h % 2 != 0 || w % 2 != 0)) {
        throw Error("group_downsample: odd extents " + shape_str(tri.shape()));
    }
    const std::size_t cout = weights.dim(1), kh = weights.dim(3), kw = weights.dim(4);
    std::vector<Tensor> planes;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor plane = reshape(slice(tri, 0, i, i + 1), {cin, h, w});
        Tensor wi = reshape(slice(weights, 0, i, i + 1), {cout, cin, kh, kw});
        Tensor bi = reshape(slice(bias, 0, i, i + 1), {cout});
        Tensor out = conv2d(plane, wi, bi, stride, pad);
        planes.push_back(reshape(out, {1, out.dim(0), out.dim(1), out.dim(2)}));
    }
    return concat(planes, 0);
}

Tensor tokenize(const Tensor& tri) {
    if (tri.rank() != 4 || tri.dim(0) != 3) throw Error("tokenize: tri must be (3,C,H,W)");
    const std::size_t c = tri.dim(1), h = tri.dim(2), w = tri.dim(3);
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor plane = reshape(slice(tri, 0, i, i + 1), {c, h * w});
        parts.push_back(transpose2d(plane));  // (HW, C)
    }
    return concat(parts, 0);
}

Tensor untokenize(const Tensor& tokens, std::size_t channels, std::size_t h, std::size_t w) {
    if (tokens.rank() != 2 || tokens.dim(1) != channels || tokens.dim(0) != 3 * h * w) {
        throw Error("untokenize: tokens " + shape_str(tokens.shape()) + " do not match 3x" +
                    std::to_string(h) + "x" + std::to_string(w) + " planes of width " +
                    std::to_string(channels));
    }
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor plane = transpose2d(slice(tokens, 0, i * h * w, (i + 1) * h * w));  // (C,HW)
        parts.push_back(reshape(plane, {1, channels, h, w}));
    }
    return concat(parts, 0);
}

void AeConfig::validate() const {
    if (stages == 0 || (in_res >> stages) == 0 || (in_res % (1u << stages)) != 0) {
        throw ConfigError("ae: stages incompatible with resolution");
    }
    if (token_width % heads != 0) throw ConfigError("ae: token_width must divide by heads");
    if (token_width < 3) throw ConfigError("ae: token_width must be >= 3");
    if (variant != "ours" && variant != "rollout" && variant != "channel_concat") {
        throw ConfigError("ae: unknown variant '" + variant + "'");
    }
    if (latent_channels == 0) throw ConfigError("ae: latent_channels must be positive");
}

// ---------------------------------------------------------------------------
// model construction

namespace {

Tensor make_group_conv_w(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    const double s = std::sqrt(2.0 / double(cin * k * k));
    return Tensor::randn({3, cout, cin, k, k}, rng, s, true);
}

Tensor make_conv_w(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    const double s = std::sqrt(2.0 / double(cin * k * k));
    return Tensor::randn({cout, cin, k, k}, rng, s, true);
}

// planes (3,C,H,W) -> rolled-out image (C,H,3W)
Tensor rollout_merge(const Tensor& tri) {
    const std::size_t c = tri.dim(1), h = tri.dim(2), w = tri.dim(3);
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        parts.push_back(reshape(slice(tri, 0, i, i + 1), {c, h, w}));
    }
    return concat(parts, 2);
}

Tensor rollout_split(const Tensor& img) {
    const std::size_t c = img.dim(0), h = img.dim(1), w3 = img.dim(2);
    const std::size_t w = w3 / 3;
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        parts.push_back(reshape(slice(img, 2, i * w, (i + 1) * w), {1, c, h, w}));
    }
    return concat(parts, 0);
}

Tensor per_plane_upsample2x(const Tensor& tri) {
    const std::size_t c = tri.dim(1), h = tri.dim(2), w = tri.dim(3);
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor up = upsample_nearest2x(reshape(slice(tri, 0, i, i + 1), {c, h, w}));
        parts.push_back(reshape(up, {1, c, 2 * h, 2 * w}));
    }
    return concat(parts, 0);
}

}  // namespace

SpatialAutoencoder::SpatialAutoencoder(const AeConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t cw = cfg_.token_width;
    const std::size_t c = cfg_.latent_channels;
    const bool ours = cfg_.variant == "ours";
    const std::size_t img_cin = cfg_.variant == "channel_concat" ? 3 * cfg_.in_channels
                                                                 : cfg_.in_channels;

    std::size_t res = cfg_.in_res;
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
        Stage st;
        const std::size_t cin = s == 0 ? (ours ? cfg_.in_channels : img_cin) : cw;
        Rng srng = rng.derive("enc").derive(s);
        if (ours) {
            st.conv_w = make_group_conv_w(cw, cin, 3, srng);
            st.conv_b = Tensor::zeros({3, cw}, true);
            res /= 2;
            st.sape = Sape::create(cw, res * res, srng);
            for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
                st.blocks.push_back(TransformerBlock::create(cw, cfg_.heads, 4, srng));
            }
        } else {
            st.conv_w = make_conv_w(cw, cin, 3, srng);
            st.conv_b = Tensor::zeros({cw}, true);
            res /= 2;
        }
        enc_.push_back(std::move(st));
    }

    // posterior head: 1x1 to 2c per latent image channel group
    {
        Rng hrng = rng.derive("enc_head");
        if (ours) {
            enc_head_w = make_group_conv_w(2 * c, cw, 1, hrng);
            enc_head_b = Tensor::zeros({3, 2 * c}, true);
            // zero-init the logvar half so the initial posterior is unit variance
            auto& wv = enc_head_w.data();
            const std::size_t per_plane = 2 * c * cw;
            for (std::size_t p = 0; p < 3; ++p) {
                for (std::size_t oc = c; oc < 2 * c; ++oc) {
                    for (std::size_t ic = 0; ic < cw; ++ic) {
                        wv[p * per_plane + oc * cw + ic] = 0.0;
                    }
                }
            }
        } else {
            const std::size_t head_out = cfg_.variant == "channel_concat" ? 6 * c : 2 * c;
            enc_head_w = make_conv_w(head_out, cw, 1, hrng);
            enc_head_b = Tensor::zeros({head_out}, true);
            auto& wv = enc_head_w.data();
            const std::size_t half = head_out / 2;
            for (std::size_t oc = half; oc < head_out; ++oc) {
                for (std::size_t ic = 0; ic < cw; ++ic) wv[oc * cw + ic] = 0.0;
            }
        }
    }

    {
        Rng drng = rng.derive("dec_in");
        if (ours) {
            dec_in_w = make_group_conv_w(cw, c, 1, drng);
            dec_in_b = Tensor::zeros({3, cw}, true);
        } else {
            const std::size_t dec_cin = cfg_.variant == "channel_concat" ? 3 * c : c;
            dec_in_w = make_conv_w(cw, dec_cin, 1, drng);
            dec_in_b = Tensor::zeros({cw}, true);
        }
    }

    res = cfg_.latent_res();
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
        Stage st;
        Rng srng = rng.derive("dec").derive(s);
        res *= 2;
        if (ours) {
            st.conv_w = make_group_conv_w(cw, cw, 3, srng);
            st.conv_b = Tensor::zeros({3, cw}, true);
            st.sape = Sape::create(cw, res * res, srng);
            for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
                st.blocks.push_back(TransformerBlock::create(cw, cfg_.heads, 4, srng));
            }
        } else {
            st.conv_w = make_conv_w(cw, cw, 3, srng);
            st.conv_b = Tensor::zeros({cw}, true);
        }
        dec_.push_back(std::move(st));
    }

    {
        Rng orng = rng.derive("dec_out");
        if (ours) {
            dec_out_w = make_group_conv_w(cfg_.in_channels, cw, 1, orng);
            dec_out_b = Tensor::zeros({3, cfg_.in_channels}, true);
        } else {
            dec_out_w = make_conv_w(img_cin, cw, 1, orng);
            dec_out_b = Tensor::zeros({img_cin}, true);
        }
    }
}

Tensor SpatialAutoencoder::encode_features(const Tensor& tri) const {
    if (tri.rank() != 4 || tri.dim(0) != 3 || tri.dim(1) != cfg_.in_channels ||
        tri.dim(2) != cfg_.in_res || tri.dim(3) != cfg_.in_res) {
        throw Error("ae encode: tri-plane " + shape_str(tri.shape()) + " does not match config");
    }
    if (cfg_.variant == "ours") {
        Tensor x = tri;
        std::size_t res = cfg_.in_res;
        for (const auto& st : enc_) {
            x = group_downsample(x, st.conv_w, st.conv_b, 2, 1);
            res /= 2;
            Tensor tokens = tokenize(x);
            if (cfg_.sape) tokens = st.sape.add_to_tokens(tokens);
            for (const auto& b : st.blocks) tokens = b.forward(tokens);
            x = untokenize(tokens, cfg_.token_width, res, res);
        }
        return group_downsample(x, enc_head_w, enc_head_b, 1, 0);  // (3,2c,h,w)
    }
    // conv baselines
    Tensor img = cfg_.variant == "rollout" ? rollout_merge(tri)
                                           : reshape(tri, {3 * cfg_.in_channels, cfg_.in_res,
                                                           cfg_.in_res});
    for (const auto& st : enc_) {
        img = softplus(conv2d(img, st.conv_w, st.conv_b, 2, 1), 1.0);
    }
    return conv2d(img, enc_head_w, enc_head_b, 1, 0);
}

LatentTriPlane SpatialAutoencoder::encode(const Tensor& tri, Rng* sample_rng) const {
    const std::size_t c = cfg_.latent_channels;
    const std::size_t h = cfg_.latent_res();
    Tensor post = encode_features(tri);
    LatentTriPlane out;
    if (cfg_.variant == "ours") {
        out.mean = slice(post, 1, 0, c);
        out.logvar = slice(post, 1, c, 2 * c);
    } else if (cfg_.variant == "channel_concat") {
        out.mean = reshape(slice(post, 0, 0, 3 * c), {3, c, h, h});
        out.logvar = reshape(slice(post, 0, 3 * c, 6 * c), {3, c, h, h});
    } else {  // rollout: post is (2c, h, 3w)
        out.mean = rollout_split(slice(post, 0, 0, c));
        out.logvar = rollout_split(slice(post, 0, c, 2 * c));
    }
    if (sample_rng) {
        std::vector<double> noise(out.mean.numel());
        sample_rng->fill_normal(noise);
        Tensor eps = Tensor::from_data(out.mean.shape(), std::move(noise));
        out.z = add(out.mean, mul(exp(mul_scalar(out.logvar, 0.5)), eps));
    } else {
        out.z = out.mean;
    }
    return out;
}

Tensor SpatialAutoencoder::decode(const Tensor& z) const {
    const std::size_t c = cfg_.latent_channels;
    const std::size_t h = cfg_.latent_res();
    if (z.rank() != 4 || z.dim(0) != 3 || z.dim(1) != c || z.dim(2) != h || z.dim(3) != h) {
        throw Error("ae decode: latent " + shape_str(z.shape()) + " does not match config " +
                    "(3," + std::to_string(c) + "," + std::to_string(h) + "," +
                    std::to_string(h) + ")");
    }
    if (cfg_.variant == "ours") {
        Tensor x = group_downsample(z, dec_in_w, dec_in_b, 1, 0);
        std::size_t res = h;
        for (const auto& st : dec_) {
            x = per_plane_upsample2x(x);
            res *= 2;
            x = group_downsample(x, st.conv_w, st.conv_b, 1, 1);
            Tensor tokens = tokenize(x);
            if (cfg_.sape) tokens = st.sape.add_to_tokens(tokens);
            for (const auto& b : st.blocks) tokens = b.forward(tokens);
            x = untokenize(tokens, cfg_.token_width, res, res);
        }
        return group_downsample(x, dec_out_w, dec_out_b, 1, 0);
    }
    Tensor img;
    if (cfg_.variant == "rollout") {
        std::vector<Tensor> parts;
        for (std::size_t i = 0; i < 3; ++i) {
            parts.push_back(reshape(slice(z, 0, i, i + 1), {c, h, h}));
        }
        img = concat(parts, 2);  // (c,h,3w)
    } else {
        img = reshape(z, {3 * c, h, h});
    }
    img = conv2d(img, dec_in_w, dec_in_b, 1, 0);
    for (const auto& st : dec_) {
        img = softplus(conv2d(upsample_nearest2x(img), st.conv_w, st.conv_b, 1, 1), 1.0);
    }
    img = conv2d(img, dec_out_w, dec_out_b, 1, 0);
    if (cfg_.variant == "rollout") return rollout_split(img);
    return reshape(img, {3, cfg_.in_channels, cfg_.in_res, cfg_.in_res});
}

ParamList SpatialAutoencoder::params() {
    ParamList out;
    collect("ae", out);
    return out;
}

void SpatialAutoencoder::collect(const std::string& prefix, ParamList& out) const {
    const bool ours = cfg_.variant == "ours";
    for (std::size_t s = 0; s < enc_.size(); ++s) {
        const auto& st = enc_[s];
        const std::string p = prefix + ".enc" + std::to_string(s);
        out.emplace_back(p + ".conv.w", st.conv_w);
        out.emplace_back(p + ".conv.b", st.conv_b);
        if (ours) {
            st.sape.collect(p + ".sape", out);
            for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                st.blocks[b].collect(p + ".block" + std::to_string(b), out);
            }
        }
    }
    out.emplace_back(prefix + ".enc_head.w", enc_head_w);
    out.emplace_back(prefix + ".enc_head.b", enc_head_b);
    out.emplace_back(prefix + ".dec_in.w", dec_in_w);
    out.emplace_back(prefix + ".dec_in.b", dec_in_b);
    for (std::size_t s = 0; s < dec_.size(); ++s) {
        const auto& st = dec_[s];
        const std::string p = prefix + ".dec" + std::to_string(s);
        out.emplace_back(p + ".conv.w", st.conv_w);
        out.emplace_back(p + ".conv.b", st.conv_b);
        if (ours) {
            st.sape.collect(p + ".sape", out);
            for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                st.blocks[b].collect(p + ".block" + std::to_string(b), out);
            }
        }
    }
    out.emplace_back(prefix + ".dec_out.w", dec_out_w);
    out.emplace_back(prefix + ".dec_out.b", dec_out_b);
}

void SpatialAutoencoder::save(const fs::path& dir, const Manifest& extra) const {
    Manifest m = extra;
    m.set_int("in_channels", (long long)cfg_.in_channels);
    m.set_int("in_res", (long long)cfg_.in_res);
    m.set_int("stages", (long long)cfg_.stages);
    m.set_int("token_width", (long long)cfg_.token_width);
    m.set_int("heads", (long long)cfg_.heads);
    m.set_int("blocks_per_stage", (long long)cfg_.blocks_per_stage);
    m.set_int("latent_channels", (long long)cfg_.latent_channels);
    m.set_double("kl_weight", cfg_.kl_weight);
    m.set_double("geo_weight", cfg_.geo_weight);
    m.set_int("geo_points", (long long)cfg_.geo_points);
    m.set_int("sape", cfg_.sape ? 1 : 0);
    m.set("variant", cfg_.variant);
    ParamList p;
    collect("ae", p);
    save_checkpoint(dir, p, m);
}

SpatialAutoencoder SpatialAutoencoder::load(const fs::path& dir) {
    Manifest m = load_checkpoint_manifest(dir);
    AeConfig cfg;
    cfg.in_channels = std::size_t(m.get_int("in_channels"));
    cfg.in_res = std::size_t(m.get_int("in_res"));
    cfg.stages = std::size_t(m.get_int("stages"));
    cfg.token_width = std::size_t(m.get_int("token_width"));
    cfg.heads = std::size_t(m.get_int("heads"));
    cfg.blocks_per_stage = std::size_t(m.get_int("blocks_per_stage"));
    cfg.latent_channels = std::size_t(m.get_int("latent_channels"));
    cfg.kl_weight = m.get_double("kl_weight");
    cfg.geo_weight = m.get_double("geo_weight");
    cfg.geo_points = std::size_t(m.get_int("geo_points"));
    cfg.sape = m.get_int("sape") != 0;
    cfg.variant = m.get("variant");
    Rng dummy(0);
    SpatialAutoencoder ae(cfg, dummy);
    ParamList p = ae.params();
    load_checkpoint(dir, p);
    return ae;
}

// ---------------------------------------------------------------------------
// loss and training

AeLoss ae_loss(const Tensor& x, const Tensor& x_rec, const Tensor& mean_t, const Tensor& logvar,
               const SdfDecoder* frozen_decoder, const SampleBatch* geo_batch,
               const GeoLossWeights& geo_weights, double kl_weight, double geo_weight) {
    if (x.shape() != x_rec.shape()) throw Error("ae_loss: reconstruction shape mismatch");
    AeLoss out;
    Tensor rec = mean(abs(sub(x, x_rec)));
    out.rec = rec.item();

    // KL(N(mu,sigma^2) || N(0,1)) per element, averaged
    Tensor kl_el = mul_scalar(
        sub(add(mul(mean_t, mean_t), exp(logvar)), add_scalar(logvar, 1.0)), 0.5);
    Tensor kl = mean(kl_el);
    out.kl = kl.item();

    Tensor total = add(rec, mul_scalar(kl, kl_weight));
    if (geo_weight != 0.0) {
        if (!frozen_decoder || !geo_batch) {
            throw Error("ae_loss: geometry term requires the frozen decoder and samples");
        }
        if (!frozen_decoder->frozen()) throw Error("ae_loss: stage-1 decoder must be frozen");
        TriPlane tri;
        tri.planes = x_rec;
        tri.channels = x_rec.dim(1);
        tri.res = x_rec.dim(2);
        NeuSdf ns{&tri, frozen_decoder};
        GeoLoss geo = geometry_loss(field_of(ns), *geo_batch, geo_weights);
        out.geo = geo.value();
        total = add(total, mul_scalar(geo.total, geo_weight));
    }
    out.total = total;
    return out;
}

void train_autoencoder(SpatialAutoencoder& ae, const std::vector<AeTrainItem>& data,
                       const SdfDecoder& frozen_decoder, const GeoLossWeights& geo_weights,
                       const AeTrainConfig& cfg, Adam& opt, long start_step,
                       const AeTrainHooks& hooks) {
    if (data.empty()) throw Error("train_autoencoder: no data");
    Rng root(cfg.seed);
    const std::size_t n_geo = ae.config().geo_points;
    for (long step = start_step; step < cfg.steps; ++step) {
        const auto& item = data[std::size_t(step) % data.size()];
        Rng rrng = root.derive("reparam").derive(std::uint64_t(step));
        LatentTriPlane enc = ae.encode(item.triplane->planes, &rrng);
        Tensor rec = ae.decode(enc.z);
        Rng grng = root.derive("geo").derive(std::uint64_t(step));
        SampleBatch gb = draw_batch(*item.samples, n_geo / 2, n_geo - n_geo / 2, grng);
        AeLoss loss = ae_loss(item.triplane->planes, rec, enc.mean, enc.logvar, &frozen_decoder,
                              &gb, geo_weights, ae.config().kl_weight, ae.config().geo_weight);
        backward(loss.total);
        opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
        opt.step();
        if (hooks.on_step) hooks.on_step(step, loss);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            opt.quantize_f32();
            if (hooks.on_checkpoint) hooks.on_checkpoint(step + 1, opt);
        }
    }
}

}  // namespace nsd
