#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>

#include "nsd/autoencoder.hpp"
#include "nsd/gradcheck.hpp"

using namespace nsd;

namespace {

double frobenius_inner(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
    return s;
}

std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t n, std::size_t m,
                                    std::size_t d, double eps, bool normalized) {
    auto phi = [](double x) { return x > 0 ? x : 0.0; };
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double denom = eps;
        std::vector<double> numer(d, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) s += phi(q[i * d + c]) * phi(k[j * d + c]);
            denom += s;
            for (std::size_t c = 0; c < d; ++c) numer[c] += s * v[j * d + c];
        }
        for (std::size_t c = 0; c < d; ++c) {
            out[i * d + c] = normalized ? numer[c] / denom : numer[c];
        }
    }
    return out;
}

}  // namespace

TEST_CASE("group conv: no cross-plane leakage, constants preserved") {
    // plane 0 all ones, planes 1,2 zero; 2x2 averaging kernels
    std::vector<double> tri(3 * 1 * 4 * 4, 0.0);
    for (std::size_t i = 0; i < 16; ++i) tri[i] = 1.0;
    Tensor x = Tensor::from_data({3, 1, 4, 4}, std::move(tri));
    Tensor w = Tensor::full({3, 1, 1, 2, 2}, 0.25);
    Tensor b = Tensor::zeros({3, 1});
    Tensor y = group_downsample(x, w, b, 2, 0);
    REQUIRE(y.shape() == Shape{3, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(1.0));
    for (std::size_t i = 4; i < 12; ++i) CHECK(y.at(i) == doctest::Approx(0.0));

    Tensor ones = Tensor::full({3, 1, 4, 4}, 1.0);
    Tensor y2 = group_downsample(ones, w, b, 2, 0);
    for (std::size_t i = 0; i < y2.numel(); ++i) CHECK(y2.at(i) == doctest::Approx(1.0));
}

TEST_CASE("group conv matches a plain strided-convolution reference") {
    Rng rng(3);
    Tensor x = Tensor::randn({3, 2, 6, 6}, rng);
    Tensor w = Tensor::randn({3, 4, 2, 3, 3}, rng, 0.5);
    Tensor b = Tensor::randn({3, 4}, rng, 0.1);
    Tensor y = group_downsample(x, w, b, 2, 1);
    REQUIRE(y.shape() == Shape{3, 4, 3, 3});

    const std::size_t cin = 2, h = 6, wd = 6, cout = 4, ho = 3, wo = 3;
    for (std::size_t p = 0; p < 3; ++p) {
        for (std::size_t oc = 0; oc < cout; ++oc) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double s = b.at(p * cout + oc);
                    for (std::size_t ic = 0; ic < cin; ++ic) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const long iy = long(oy) * 2 + ky - 1;
                                const long ix = long(ox) * 2 + kx - 1;
                                if (iy < 0 || iy >= long(h) || ix < 0 || ix >= long(wd)) continue;
                                s += x.at(((p * cin + ic) * h + iy) * wd + ix) *
                                     w.at((((p * cout + oc) * cin + ic) * 3 + ky) * 3 + kx);
                            }
                        }
                    }
                    CHECK(y.at(((p * cout + oc) * ho + oy) * wo + ox) ==
                          doctest::Approx(s).epsilon(1e-12));
                }
            }
        }
    }

    Tensor odd = Tensor::randn({3, 2, 5, 5}, rng);
    CHECK_THROWS_AS(group_downsample(odd, w, b, 2, 1), Error);
}

TEST_CASE("tokenize layout and exact round trip") {
    std::vector<double> vals(3 * 1 * 2 * 2);
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t i = 0; i < 4; ++i) vals[p * 4 + i] = double(p);
    Tensor tri = Tensor::from_data({3, 1, 2, 2}, vals);
    Tensor tokens = tokenize(tri);
    REQUIRE(tokens.shape() == Shape{12, 1});
    const double expect[12] = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
    for (int i = 0; i < 12; ++i) CHECK(tokens.at(i) == expect[i]);

    // token H*W is the first texel of plane XZ
    Rng rng(5);
    Tensor tri2 = Tensor::randn({3, 4, 4, 4}, rng);
    Tensor tok2 = tokenize(tri2);
    const std::size_t hw = 16;
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(tok2.at(hw * 4 + c) == tri2.at((1 * 4 + c) * 16 + 0));
    }

    Tensor back = untokenize(tok2, 4, 4, 4);
    REQUIRE(back.shape() == tri2.shape());
    for (std::size_t i = 0; i < tri2.numel(); ++i) CHECK(back.at(i) == tri2.at(i));
}

TEST_CASE("sape canonical case h = e0") {
    Sape s;
    s.h = Tensor::from_data({4}, {1, 0, 0, 0});
    s.t = Tensor::from_data({5}, {0.1, 0.2, 0.3, 0.4, 0.5});
    auto p = s.embeddings();
    // H = diag(-1,1,1,1): p0 = -e0 t^T, p1 = e1 t^T, p2 = e2 t^T
    for (std::size_t j = 0; j < 5; ++j) {
        CHECK(p[0].at(0 * 5 + j) == doctest::Approx(-s.t.at(j)));
        CHECK(p[1].at(1 * 5 + j) == doctest::Approx(s.t.at(j)));
        CHECK(p[2].at(2 * 5 + j) == doctest::Approx(s.t.at(j)));
    }
    // off-row entries vanish
    CHECK(p[0].at(1 * 5 + 0) == doctest::Approx(0.0));
    CHECK(p[1].at(0 * 5 + 0) == doctest::Approx(0.0));
}

TEST_CASE("sape embeddings are pairwise Frobenius-orthogonal") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t C = 3 + rng.index(8), HW = 4 + rng.index(16);
        Rng srng = rng.derive(std::uint64_t(trial));
        Sape s = Sape::create(C, HW, srng);
        auto p = s.embeddings();
        CHECK(std::fabs(frobenius_inner(p[0], p[1])) < 1e-10);
        CHECK(std::fabs(frobenius_inner(p[0], p[2])) < 1e-10);
        CHECK(std::fabs(frobenius_inner(p[1], p[2])) < 1e-10);
    }
}

TEST_CASE("sape matches explicit Householder construction") {
    Rng rng(11);
    const std::size_t C = 8, HW = 16;
    Sape s = Sape::create(C, HW, rng);
    auto p = s.embeddings();
    // explicit H = I - (2/h^T h) h h^T
    double n2 = 0;
    for (std::size_t i = 0; i < C; ++i) n2 += s.h.at(i) * s.h.at(i);
    for (std::size_t col = 0; col < 3; ++col) {
        for (std::size_t i = 0; i < C; ++i) {
            const double Hic = (i == col ? 1.0 : 0.0) - 2.0 * s.h.at(i) * s.h.at(col) / n2;
            for (std::size_t j = 0; j < HW; ++j) {
                CHECK(p[col].at(i * HW + j) == doctest::Approx(Hic * s.t.at(j)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("sape gradcheck") {
    Rng rng(13);
    Sape s = Sape::create(4, 6, rng);
    Tensor tokens = Tensor::randn({18, 4}, rng);
    Tensor proj = Tensor::randn({18, 4}, rng);
    auto loss = [&]() { return sum(mul(s.add_to_tokens(tokens), proj)); };
    CHECK(grad_check(loss, s.h, 1e-4) < 1e-4);
    CHECK(grad_check(loss, s.t, 1e-4) < 1e-4);
}

TEST_CASE("linear attention worked example") {
    Tensor q = Tensor::from_data({2, 1}, {1, 2});
    Tensor k = Tensor::from_data({2, 1}, {1, 1});
    Tensor v = Tensor::from_data({2, 1}, {3, 5});
    Tensor un = linear_attention(q, k, v, 1e-6, false);
    CHECK(un.at(0) == doctest::Approx(8.0));
    CHECK(un.at(1) == doctest::Approx(16.0));
    Tensor nm = linear_attention(q, k, v, 1e-6, true);
    CHECK(nm.at(0) == doctest::Approx(4.0).epsilon(1e-5));
    CHECK(nm.at(1) == doctest::Approx(4.0).epsilon(1e-5));
}

TEST_CASE("identical keys make all outputs identical") {
    Rng rng(17);
    std::vector<double> qv(6 * 4);
    for (auto& x : qv) x = rng.uniform(0.2, 1.5);  // positive: phi(Q) never zeroes a row
    Tensor q = Tensor::from_data({6, 4}, std::move(qv));
    Tensor k = Tensor::full({5, 4}, 0.7);
    Tensor v = Tensor::randn({5, 4}, rng);
    Tensor o = linear_attention(q, k, v, 1e-12);
    for (std::size_t i = 1; i < 6; ++i) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(o.at(i * 4 + c) == doctest::Approx(o.at(c)).epsilon(1e-9));
        }
    }
}

TEST_CASE("linear attention equals the quadratic oracle") {
    Rng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 16 + rng.index(48), d = 2 + rng.index(7);
        Rng trng = rng.derive(std::uint64_t(trial));
        Tensor q = Tensor::randn({n, d}, trng);
        Tensor k = Tensor::randn({n, d}, trng);
        Tensor v = Tensor::randn({n, d}, trng);
        for (bool normalized : {false, true}) {
            Tensor o = linear_attention(q, k, v, 1e-6, normalized);
            auto ref = naive_attention(q.data(), k.data(), v.data(), n, n, d, 1e-6, normalized);
            for (std::size_t i = 0; i < o.numel(); ++i) {
                CHECK(std::fabs(o.at(i) - ref[i]) < 1e-10);
            }
        }
    }
}

TEST_CASE("linear attention gradcheck (inputs kept off the relu kink)") {
    Rng rng(23);
    auto offset = [&](Shape s) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) {
            x = rng.uniform(0.1, 1.0);
            if (rng.bernoulli(0.5)) x = -x;
        }
        return Tensor::from_data(std::move(s), std::move(v), true);
    };
    Tensor q = offset({5, 3}), k = offset({5, 3}), v = offset({5, 3});
    Tensor proj = Tensor::randn({5, 3}, rng);
    auto loss = [&]() { return sum(mul(linear_attention(q, k, v), proj)); };
    CHECK(grad_check(loss, q, 1e-5) < 1e-4);
    CHECK(grad_check(loss, k, 1e-5) < 1e-4);
    CHECK(grad_check(loss, v, 1e-5) < 1e-4);
}

TEST_CASE("attention wall clock grows near-linearly") {
    Rng rng(29);
    const std::size_t d = 64;
    auto time_n = [&](std::size_t n) {
        Tensor q = Tensor::randn({n, d}, rng);
        Tensor k = Tensor::randn({n, d}, rng);
        Tensor v = Tensor::randn({n, d}, rng);
        NoGradGuard ng;
        for (int i = 0; i < 5; ++i) linear_attention(q, k, v);  // warm caches + allocator
        double best = 1e9;
        for (int trial = 0; trial < 8; ++trial) {
            const auto t0 = std::chrono::steady_clock::now();
            const int reps = 4;
            for (int r = 0; r < reps; ++r) linear_attention(q, k, v);
            const auto t1 = std::chrono::steady_clock::now();
            best = std::min(best, std::chrono::duration<double>(t1 - t0).count() / reps);
        }
        return best;
    };
    const double t512 = time_n(512);
    const double t4096 = time_n(4096);
    MESSAGE("t512=" << t512 << " t4096=" << t4096 << " ratio=" << t4096 / t512);
    CHECK(t4096 / t512 <= 10.0);
}

TEST_CASE("encode produces the documented latent shape and is deterministic") {
    Rng rng(31);
    AeConfig cfg;  // desk defaults: 32^2 x 8 -> 3x4x8x8
    SpatialAutoencoder ae(cfg, rng);
    Tensor tri = Tensor::randn({3, 8, 32, 32}, rng);
    LatentTriPlane a = ae.encode(tri, nullptr);
    CHECK(a.z.shape() == Shape{3, 4, 8, 8});
    LatentTriPlane b = ae.encode(tri, nullptr);
    for (std::size_t i = 0; i < a.z.numel(); ++i) CHECK(a.z.at(i) == b.z.at(i));

    // logvar head zero-initialized: posterior variance starts at 1
    for (std::size_t i = 0; i < a.logvar.numel(); ++i) CHECK(a.logvar.at(i) == 0.0);

    Tensor rec = ae.decode(a.z);
    CHECK(rec.shape() == tri.shape());
}

TEST_CASE("kl term: zero mean and zero logvar give zero") {
    Tensor x = Tensor::zeros({3, 1, 4, 4});
    Tensor mean_t = Tensor::zeros({3, 1, 2, 2});
    Tensor logvar = Tensor::zeros({3, 1, 2, 2});
    GeoLossWeights gw;
    AeLoss l = ae_loss(x, x, mean_t, logvar, nullptr, nullptr, gw, 1.0, 0.0);
    CHECK(l.kl == doctest::Approx(0.0));
    CHECK(l.rec == doctest::Approx(0.0));

    // mu^2/2 form when logvar = 0
    Tensor mean2 = Tensor::full({3, 1, 2, 2}, 0.6);
    AeLoss l2 = ae_loss(x, x, mean2, logvar, nullptr, nullptr, gw, 1.0, 0.0);
    CHECK(l2.kl == doctest::Approx(0.5 * 0.36));
}

TEST_CASE("ae_loss matches scalar recomputation with weights off and on") {
    Rng rng(37);
    Tensor x = Tensor::randn({3, 1, 4, 4}, rng);
    Tensor xr = Tensor::randn({3, 1, 4, 4}, rng);
    Tensor mu = Tensor::randn({3, 1, 2, 2}, rng);
    Tensor lv = Tensor::randn({3, 1, 2, 2}, rng, 0.3);
    GeoLossWeights gw;
    AeLoss l = ae_loss(x, xr, mu, lv, nullptr, nullptr, gw, 0.0, 0.0);
    double rec = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) rec += std::fabs(x.at(i) - xr.at(i));
    rec /= double(x.numel());
    CHECK(l.value() == doctest::Approx(rec).epsilon(1e-12));  // plain L1 with weights zero

    AeLoss l2 = ae_loss(x, xr, mu, lv, nullptr, nullptr, gw, 2.5, 0.0);
    double kl = 0;
    for (std::size_t i = 0; i < mu.numel(); ++i) {
        kl += 0.5 * (mu.at(i) * mu.at(i) + std::exp(lv.at(i)) - 1.0 - lv.at(i));
    }
    kl /= double(mu.numel());
    CHECK(l2.value() == doctest::Approx(rec + 2.5 * kl).epsilon(1e-12));
}

TEST_CASE("plane permutation changes the output once SAPE is present") {
    Rng rng(41);
    AeConfig cfg;
    cfg.in_res = 16;
    cfg.token_width = 8;
    cfg.heads = 2;
    SpatialAutoencoder ae(cfg, rng);
    Tensor tri = Tensor::randn({3, 8, 16, 16}, rng);
    // swap planes 0 and 1
    std::vector<double> sw(tri.data());
    const std::size_t plane = 8 * 16 * 16;
    for (std::size_t i = 0; i < plane; ++i) std::swap(sw[i], sw[plane + i]);
    Tensor tri_sw = Tensor::from_data(tri.shape(), std::move(sw));
    Tensor a = ae.decode(ae.encode(tri, nullptr).z);
    Tensor b = ae.decode(ae.encode(tri_sw, nullptr).z);
    double diff = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a.at(i) - b.at(i)));
    CHECK(diff > 1e-6);
}

TEST_CASE("conv baseline variants run and reconstruct shapes") {
    Rng rng(43);
    for (const char* variant : {"rollout", "channel_concat"}) {
        AeConfig cfg;
        cfg.in_res = 16;
        cfg.token_width = 16;
        cfg.variant = variant;
        Rng vrng = rng.derive(variant);
        SpatialAutoencoder ae(cfg, vrng);
        Tensor tri = Tensor::randn({3, 8, 16, 16}, vrng);
        LatentTriPlane enc = ae.encode(tri, nullptr);
        CHECK(enc.z.shape() == Shape{3, 4, 4, 4});
        Tensor rec = ae.decode(enc.z);
        CHECK(rec.shape() == tri.shape());
    }
}

TEST_CASE("ae gradcheck through conv, sape and attention paths") {
    Rng rng(47);
    AeConfig cfg;
    cfg.in_res = 8;
    cfg.stages = 1;
    cfg.token_width = 4;
    cfg.heads = 1;
    cfg.latent_channels = 2;
    SpatialAutoencoder ae(cfg, rng);
    Tensor tri = Tensor::randn({3, 8, 8, 8}, rng);
    Tensor mu_proj = Tensor::randn({3, 2, 4, 4}, rng);
    auto loss = [&]() {
        LatentTriPlane enc = ae.encode(tri, nullptr);
        Tensor rec = ae.decode(enc.z);
        return add(mean(mul(rec, rec)), sum(mul(enc.mean, mu_proj)));
    };
    ParamList ps = ae.params();
    int checked = 0;
    for (auto& [name, t] : ps) {
        if (name.find("enc0.conv.w") != std::string::npos ||
            name.find("enc0.sape.h") != std::string::npos ||
            name.find("enc0.block0.attn.wq.w") != std::string::npos ||
            name.find("dec0.block0.ffn.in.w") != std::string::npos ||
            name.find("dec_out.w") != std::string::npos) {
            CHECK(grad_check(loss, t, 1e-4) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked == 5);
}

TEST_CASE("overfitting a single tri-plane drives L1 below 1 percent") {
    Rng rng(53);
    AeConfig cfg;
    cfg.in_channels = 4;
    cfg.in_res = 16;
    cfg.stages = 2;
    cfg.token_width = 16;
    cfg.heads = 2;
    cfg.latent_channels = 4;
    cfg.geo_weight = 0.0;  // reconstruction-only overfit
    cfg.kl_weight = 0.0;
    SpatialAutoencoder ae(cfg, rng);
    // smooth planes, like fitted tri-planes (white noise is incompressible)
    std::vector<double> vals(3 * 4 * 16 * 16);
    for (std::size_t p = 0; p < 3; ++p) {
        for (std::size_t c = 0; c < 4; ++c) {
            const double ax = rng.uniform(0.5, 2.0), ay = rng.uniform(0.5, 2.0);
            const double ph = rng.uniform(0, 6.28), amp = rng.uniform(0.5, 1.5);
            for (std::size_t y = 0; y < 16; ++y) {
                for (std::size_t x = 0; x < 16; ++x) {
                    vals[((p * 4 + c) * 16 + y) * 16 + x] =
                        amp * std::cos(ax * double(x) * 0.4 + ay * double(y) * 0.4 + ph);
                }
            }
        }
    }
    Tensor tri = Tensor::from_data({3, 4, 16, 16}, std::move(vals));

    Adam opt({.lr = 3e-3});
    for (auto& [name, t] : ae.params()) opt.add_param(name, t);
    GeoLossWeights gw;
    double final_rec = 1e9;
    for (int step = 0; step < 2000; ++step) {
        LatentTriPlane enc = ae.encode(tri, nullptr);
        Tensor rec = ae.decode(enc.z);
        AeLoss l = ae_loss(tri, rec, enc.mean, enc.logvar, nullptr, nullptr, gw, 0.0, 0.0);
        backward(l.total);
        opt.set_lr(cosine_lr(3e-3, step, 2000));
        opt.step();
        final_rec = l.rec;
    }
    double base = 0;
    for (std::size_t i = 0; i < tri.numel(); ++i) base += std::fabs(tri.at(i));
    base /= double(tri.numel());
    MESSAGE("overfit rec L1 " << final_rec << " vs |x| " << base);
    CHECK(final_rec < 0.01 * base);
}

TEST_CASE("ae persistence round trip preserves the forward map") {
    Rng rng(59);
    AeConfig cfg;
    cfg.in_res = 16;
    cfg.token_width = 8;
    cfg.heads = 2;
    SpatialAutoencoder ae(cfg, rng);
    auto dir = std::filesystem::temp_directory_path() / "nsd_ae_test";
    ae.save(dir);
    SpatialAutoencoder ae2 = SpatialAutoencoder::load(dir);
    Tensor tri = Tensor::randn({3, 8, 16, 16}, rng);
    // quantize the probe input like the checkpoint did its params
    LatentTriPlane a = ae.encode(tri, nullptr);
    LatentTriPlane b = ae2.encode(tri, nullptr);
    for (std::size_t i = 0; i < a.z.numel(); ++i) {
        CHECK(b.z.at(i) == doctest::Approx(a.z.at(i)).epsilon(1e-5));
    }
}
