#pragma once

#include <array>

#include "nsd/nn.hpp"

namespace nsd {

// Kernelized attention, never materializes NxN. phi is relu; the
// normalizer keeps an epsilon floor. Set normalized=false for the raw
// phi(Q) (phi(K)^T V) form.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, double eps = 1e-6,
                        bool normalized = true);

// Standard softmax attention; used for condition injection where the key
// set is tiny.
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Reduces (N,d) to (1,d) by columnwise max via a balanced fold.
Tensor rows_max(const Tensor& x);

// Spatial position embeddings from a Householder reflection: the first
// three columns of H = I - (2/h^T h) h h^T are mutually orthogonal; each
// is outer-multiplied with t to give one embedding per plane.
struct Sape {
    Tensor h;  // (C)
    Tensor t;  // (HW)

    static Sape create(std::size_t channels, std::size_t positions, Rng& rng);

    // p0, p1, p2, each (C, HW), pairwise Frobenius-orthogonal.
    std::array<Tensor, 3> embeddings() const;

    // Adds embedding i to the tokens of plane i; tokens are (3*HW, C).
    Tensor add_to_tokens(const Tensor& tokens) const;

    void collect(const std::string& prefix, ParamList& out) const;
    void set_requires_grad(bool v) {
        h.set_requires_grad(v);
        t.set_requires_grad(v);
    }
};

struct LayerNorm {
    Tensor gamma, beta;  // (1,d)
    double eps = 1e-6;

    static LayerNorm create(std::size_t d);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct MultiHeadLinearAttention {
    Linear wq, wk, wv, wo;
    std::size_t heads = 1;

    static MultiHeadLinearAttention create(std::size_t width, std::size_t heads, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Q from the tokens, K/V projected from condition tokens (possibly a
// single pooled embedding).
struct CrossAttention {
    Linear wq, wk, wv, wo;

    static CrossAttention create(std::size_t width, std::size_t cond_dim, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& cond) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct FeedForward {
    Linear in, out;

    static FeedForward create(std::size_t width, std::size_t hidden, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-norm residual block: x += attn(LN(x)); x += ffn(LN(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadLinearAttention attn;
    FeedForward ffn;

    static TransformerBlock create(std::size_t width, std::size_t heads, std::size_t ffn_mult,
                                   Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace nsd
