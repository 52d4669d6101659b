#include "nsd/attention.hpp"

#include <cmath>

namespace nsd {

namespace {

std::vector<double> relu_copy(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
    return out;
}

}  // namespace

// Fused kernelized attention built on the GEMM kernels: S = phi(K)^T V and
// z = phi(K)^T 1 are computed once, so cost stays O(N d^2) with no NxN
// intermediate. Backward is handwritten around the same kernels.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, double eps,
                        bool normalized) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw Error("linear_attention: rank-2 Q,K,V required");
    }
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw Error("linear_attention: shape mismatch Q" + shape_str(q.shape()) + " K" +
                    shape_str(k.shape()) + " V" + shape_str(v.shape()));
    }
    if (normalized && eps <= 0) {
        throw Error("linear_attention: eps must be positive when normalized");
    }
    const std::size_t n = q.dim(0), d = q.dim(1), m = k.dim(0), dv = v.dim(1);

    std::vector<double> phi_q = relu_copy(q.data());
    std::vector<double> phi_k = relu_copy(k.data());

    std::vector<double> S(d * dv);
    mm_tn(phi_k.data(), v.data().data(), S.data(), d, m, dv);  // (d,dv)
    std::vector<double> z(d, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        const double* kj = phi_k.data() + j * d;
        for (std::size_t a = 0; a < d; ++a) z[a] += kj[a];
    }

    std::vector<double> out(n * dv);
    mm_nn(phi_q.data(), S.data(), out.data(), n, d, dv);
    std::vector<double> denom(normalized ? n : 0);
    if (normalized) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* qi = phi_q.data() + i * d;
            double w = eps;
            for (std::size_t a = 0; a < d; ++a) w += qi[a] * z[a];
            denom[i] = w;
            double* oi = out.data() + i * dv;
            const double inv = 1.0 / w;
            for (std::size_t c = 0; c < dv; ++c) oi[c] *= inv;
        }
    }

    return make_op_node(
        "linear_attention", {n, dv}, std::move(out), {q, k, v},
        [n, d, m, dv, normalized, S = std::move(S), z = std::move(z),
         denom = std::move(denom)](const NdArray& o) {
            NdArray* pq = o.parents[0].get();
            NdArray* pk = o.parents[1].get();
            NdArray* pv = o.parents[2].get();
            std::vector<double> phi_q = relu_copy(pq->value);
            std::vector<double> phi_k = relu_copy(pk->value);

            // dU = dO / w row-wise; dw_i = -(dO_i . O_i)/w_i
            std::vector<double> dU(n * dv);
            std::vector<double> dw(normalized ? n : 0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* go = o.grad.data() + i * dv;
                double* du = dU.data() + i * dv;
                if (normalized) {
                    const double* oi = o.value.data() + i * dv;
                    const double inv = 1.0 / denom[i];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dv; ++c) {
                        du[c] = go[c] * inv;
                        acc += go[c] * oi[c];
                    }
                    dw[i] = -acc * inv;
                } else {
                    for (std::size_t c = 0; c < dv; ++c) du[c] = go[c];
                }
            }

            if (pq->requires_grad) {
                pq->ensure_grad();
                std::vector<double> dphi_q(n * d);
                mm_nt(dU.data(), S.data(), dphi_q.data(), n, dv, d);
                for (std::size_t i = 0; i < n; ++i) {
                    const double* qrow = pq->value.data() + i * d;
                    double* grow = pq->grad.data() + i * d;
                    const double* dprow = dphi_q.data() + i * d;
                    const double wgrad = normalized ? dw[i] : 0.0;
                    for (std::size_t a = 0; a < d; ++a) {
                        if (qrow[a] > 0) grow[a] += dprow[a] + wgrad * z[a];
                    }
                }
            }

            if (pk->requires_grad || pv->requires_grad) {
                // dS = phi(Q)^T dU; dz = phi(Q)^T dw
                std::vector<double> dS(d * dv);
                mm_tn(phi_q.data(), dU.data(), dS.data(), d, n, dv);
                std::vector<double> dz(d, 0.0);
                if (normalized) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const double* qi = phi_q.data() + i * d;
                        for (std::size_t a = 0; a < d; ++a) dz[a] += qi[a] * dw[i];
                    }
                }
                if (pv->requires_grad) {
                    pv->ensure_grad();
                    mm_nn_acc(phi_k.data(), dS.data(), pv->grad.data(), m, d, dv);
                }
                if (pk->requires_grad) {
                    pk->ensure_grad();
                    std::vector<double> dphi_k(m * d);
                    mm_nt(pv->value.data(), dS.data(), dphi_k.data(), m, dv, d);
                    for (std::size_t j = 0; j < m; ++j) {
                        const double* krow = pk->value.data() + j * d;
                        double* grow = pk->grad.data() + j * d;
                        const double* dprow = dphi_k.data() + j * d;
                        for (std::size_t a = 0; a < d; ++a) {
                            if (krow[a] > 0) grow[a] += dprow[a] + dz[a];
                        }
                    }
                }
            }
        });
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw Error("softmax_attention: shape mismatch");
    }
    const double scale = 1.0 / std::sqrt(double(q.dim(1)));
    Tensor logits = mul_scalar(matmul(q, transpose2d(k)), scale);  // (n, m)
    return matmul(softmax_rows(logits), v);
}

Tensor rows_max(const Tensor& x) {
    if (x.rank() != 2) throw Error("rows_max: rank-2 tensor required");
    std::size_t n = x.dim(0);
    if (n == 1) return x;
    Tensor cur = x;
    while (n > 1) {
        const std::size_t half = n / 2;
        Tensor a = slice(cur, 0, 0, half);
        Tensor b = slice(cur, 0, half, 2 * half);
        Tensor m = maximum(a, b);
        if (n % 2 == 1) {
            cur = concat({m, slice(cur, 0, n - 1, n)}, 0);
            n = half + 1;
        } else {
            cur = m;
            n = half;
        }
    }
    return cur;
}

// ---------------------------------------------------------------------------
// SAPE

Sape Sape::create(std::size_t channels, std::size_t positions, Rng& rng) {
    if (channels < 3) throw Error("Sape: needs at least 3 channels");
    Sape s;
    s.h = Tensor::randn({channels}, rng, 1.0, true);
    s.t = Tensor::randn({positions}, rng, 0.02, true);
    return s;
}

std::array<Tensor, 3> Sape::embeddings() const {
    const std::size_t C = h.numel();
    if (C < 3) throw Error("Sape: needs at least 3 channels");
    Tensor hc = reshape(h, {C, 1});
    Tensor outer = matmul(hc, transpose2d(hc));                 // (C,C)
    Tensor n2 = maximum(sum(mul(h, h)), Tensor::scalar(1e-16));  // ||h||^2 floor
    Tensor scale = div(Tensor::scalar(2.0), n2);                 // scalar
    Tensor hh = mul(outer, broadcast_to(reshape(scale, {1, 1}), {C, C}));
    std::vector<double> eye(C * C, 0.0);
    for (std::size_t i = 0; i < C; ++i) eye[i * C + i] = 1.0;
    Tensor house = sub(Tensor::from_data({C, C}, std::move(eye)), hh);

    Tensor trow = reshape(t, {1, t.numel()});
    std::array<Tensor, 3> out;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor col = slice(house, 1, i, i + 1);  // (C,1)
        out[i] = matmul(col, trow);              // (C,HW)
    }
    return out;
}

Tensor Sape::add_to_tokens(const Tensor& tokens) const {
    const std::size_t hw = t.numel();
    if (tokens.rank() != 2 || tokens.dim(0) != 3 * hw || tokens.dim(1) != h.numel()) {
        throw Error("Sape: tokens must be (3*HW," + std::to_string(h.numel()) + "), got " +
                    shape_str(tokens.shape()));
    }
    auto emb = embeddings();
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor plane = slice(tokens, 0, i * hw, (i + 1) * hw);
        parts.push_back(add(plane, transpose2d(emb[i])));
    }
    return concat(parts, 0);
}

void Sape::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".h", h);
    out.emplace_back(prefix + ".t", t);
}

// ---------------------------------------------------------------------------
// blocks

LayerNorm LayerNorm::create(std::size_t d) {
    LayerNorm ln;
    ln.gamma = Tensor::full({1, d}, 1.0, true);
    ln.beta = Tensor::zeros({1, d}, true);
    return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor mu = rowmean(x);                                     // (n,1)
    Tensor xc = sub(x, broadcast_to(mu, {n, d}));
    Tensor var = rowmean(mul(xc, xc));                          // (n,1)
    Tensor inv = div(Tensor::full({n, 1}, 1.0), sqrt(add_scalar(var, eps)));
    Tensor y = mul(xc, broadcast_to(inv, {n, d}));
    return add(mul(y, broadcast_to(gamma, {n, d})), broadcast_to(beta, {n, d}));
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

MultiHeadLinearAttention MultiHeadLinearAttention::create(std::size_t width, std::size_t heads,
                                                          Rng& rng) {
    if (heads == 0 || width % heads != 0) {
        throw Error("MultiHeadLinearAttention: width must divide by heads");
    }
    MultiHeadLinearAttention a;
    a.heads = heads;
    const double s = std::sqrt(1.0 / double(width));
    a.wq = Linear::create(width, width, rng, s);
    a.wk = Linear::create(width, width, rng, s);
    a.wv = Linear::create(width, width, rng, s);
    a.wo = Linear::create(width, width, rng, s);
    return a;
}

Tensor MultiHeadLinearAttention::forward(const Tensor& x) const {
    const std::size_t width = wq.w.dim(0);
    const std::size_t dh = width / heads;
    Tensor q = wq.forward(x), k = wk.forward(x), v = wv.forward(x);
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vh = slice(v, 1, h * dh, (h + 1) * dh);
        outs.push_back(linear_attention(qh, kh, vh));
    }
    return wo.forward(concat(outs, 1));
}

void MultiHeadLinearAttention::collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

CrossAttention CrossAttention::create(std::size_t width, std::size_t cond_dim, Rng& rng) {
    CrossAttention c;
    c.wq = Linear::create(width, width, rng, std::sqrt(1.0 / double(width)));
    c.wk = Linear::create(cond_dim, width, rng, std::sqrt(1.0 / double(cond_dim)));
    c.wv = Linear::create(cond_dim, width, rng, std::sqrt(1.0 / double(cond_dim)));
    c.wo = Linear::create(width, width, rng, std::sqrt(1.0 / double(width)));
    return c;
}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& cond) const {
    Tensor q = wq.forward(x);
    Tensor k = wk.forward(cond);
    Tensor v = wv.forward(cond);
    return wo.forward(softmax_attention(q, k, v));
}

void CrossAttention::collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

FeedForward FeedForward::create(std::size_t width, std::size_t hidden, Rng& rng) {
    FeedForward f;
    f.in = Linear::create(width, hidden, rng);
    f.out = Linear::create(hidden, width, rng, std::sqrt(1.0 / double(hidden)));
    return f;
}

Tensor FeedForward::forward(const Tensor& x) const {
    return out.forward(softplus(in.forward(x), 1.0));
}

void FeedForward::collect(const std::string& prefix, ParamList& out_list) const {
    in.collect(prefix + ".in", out_list);
    out.collect(prefix + ".out", out_list);
}

TransformerBlock TransformerBlock::create(std::size_t width, std::size_t heads,
                                          std::size_t ffn_mult, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm::create(width);
    b.ln2 = LayerNorm::create(width);
    b.attn = MultiHeadLinearAttention::create(width, heads, rng);
    b.ffn = FeedForward::create(width, width * ffn_mult, rng);
    return b;
}

Tensor TransformerBlock::forward(const Tensor& x) const {
    Tensor y = add(x, attn.forward(ln1.forward(x)));
    return add(y, ffn.forward(ln2.forward(y)));
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    attn.collect(prefix + ".attn", out);
    ffn.collect(prefix + ".ffn", out);
}

}  // namespace nsd
