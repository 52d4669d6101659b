#include "nsd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace nsd {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
    }
}

NdArray* parent(const NdArray& out, std::size_t i) { return out.parents[i].get(); }

void acc(NdArray* p, std::size_t i, double g) {
    p->grad[i] += g;
}

bool wants(NdArray* p) { return p->requires_grad; }

void prep(NdArray* p) { p->ensure_grad(); }

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    return make_op_node("add", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        for (int s = 0; s < 2; ++s) {
            NdArray* p = parent(out, s);
            if (!wants(p)) continue;
            prep(p);
            for (std::size_t i = 0; i < out.grad.size(); ++i) acc(p, i, out.grad[i]);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    return make_op_node("sub", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        NdArray* pa = parent(out, 0);
        NdArray* pb = parent(out, 1);
        if (wants(pa)) {
            prep(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i) acc(pa, i, out.grad[i]);
        }
        if (wants(pb)) {
            prep(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i) acc(pb, i, -out.grad[i]);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
    return make_op_node("mul", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        NdArray* pa = parent(out, 0);
        NdArray* pb = parent(out, 1);
        if (wants(pa)) {
            prep(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                acc(pa, i, out.grad[i] * pb->value[i]);
        }
        if (wants(pb)) {
            prep(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                acc(pb, i, out.grad[i] * pa->value[i]);
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] / bv[i];
    return make_op_node("div", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        NdArray* pa = parent(out, 0);
        NdArray* pb = parent(out, 1);
        if (wants(pa)) {
            prep(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                acc(pa, i, out.grad[i] / pb->value[i]);
        }
        if (wants(pb)) {
            prep(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                acc(pb, i, -out.grad[i] * out.value[i] / pb->value[i]);
        }
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "maximum");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(av[i], bv[i]);
    // Subgradient: ties go to the first argument.
    return make_op_node("maximum", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        NdArray* pa = parent(out, 0);
        NdArray* pb = parent(out, 1);
        if (wants(pa)) prep(pa);
        if (wants(pb)) prep(pb);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            if (pa->value[i] >= pb->value[i]) {
                if (wants(pa)) acc(pa, i, out.grad[i]);
            } else if (wants(pb)) {
                acc(pb, i, out.grad[i]);
            }
        }
    });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "minimum");
    std::vector<double> v(a.numel());
    const auto &av = a.data(), &bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(av[i], bv[i]);
    return make_op_node("minimum", a.shape(), std::move(v), {a, b}, [](const NdArray& out) {
        NdArray* pa = parent(out, 0);
        NdArray* pb = parent(out, 1);
        if (wants(pa)) prep(pa);
        if (wants(pb)) prep(pb);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            if (pa->value[i] <= pb->value[i]) {
                if (wants(pa)) acc(pa, i, out.grad[i]);
            } else if (wants(pb)) {
                acc(pb, i, out.grad[i]);
            }
        }
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + c;
    return make_op_node("add_scalar", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i) acc(p, i, out.grad[i]);
    });
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * c;
    return make_op_node("mul_scalar", a.shape(), std::move(v), {a}, [c](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i) acc(p, i, c * out.grad[i]);
    });
}

// ---------------------------------------------------------------------------
// unary

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(av[i]);
    return make_op_node("exp", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            acc(p, i, out.grad[i] * out.value[i]);
    });
}

Tensor log(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(av[i]);
    return make_op_node("log", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            acc(p, i, out.grad[i] / p->value[i]);
    });
}

Tensor sqrt(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(av[i]);
    return make_op_node("sqrt", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            acc(p, i, out.grad[i] * 0.5 / out.value[i]);
    });
}

Tensor abs(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fabs(av[i]);
    return make_op_node("abs", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const double x = p->value[i];
            const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            acc(p, i, out.grad[i] * s);
        }
    });
}

Tensor tanh(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(av[i]);
    return make_op_node("tanh", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            acc(p, i, out.grad[i] * (1.0 - out.value[i] * out.value[i]));
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] > 0.0 ? av[i] : 0.0;
    return make_op_node("relu", a.shape(), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            if (p->value[i] > 0.0) acc(p, i, out.grad[i]);
    });
}

Tensor softplus(const Tensor& a, double beta) {
    if (beta <= 0.0) throw Error("softplus: beta must be positive");
    std::vector<double> v(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double bx = beta * av[i];
        // (1/b)*(max(bx,0) + log1p(exp(-|bx|))), stable for large |bx|
        v[i] = (std::max(bx, 0.0) + std::log1p(std::exp(-std::fabs(bx)))) / beta;
    }
    return make_op_node("softplus", a.shape(), std::move(v), {a}, [beta](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const double bx = beta * p->value[i];
            const double sig = bx >= 0.0 ? 1.0 / (1.0 + std::exp(-bx))
                                         : std::exp(bx) / (1.0 + std::exp(bx));
            acc(p, i, out.grad[i] * sig);
        }
    });
}

// ---------------------------------------------------------------------------
// matmul kernels

void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    std::memset(c, 0, m * n * sizeof(double));
    mm_nn_acc(a, b, c, m, k, n);
}

void mm_nn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    std::memset(c, 0, m * n * sizeof(double));
    mm_nt_acc(a, b, c, m, k, n);
}

void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    std::memset(c, 0, m * n * sizeof(double));
    mm_tn_acc(a, b, c, m, k, n);
}

void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
    // a is (k,m) used as transposed, b is (k,n)
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw Error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> v(m * n);
    mm_nn(a.data().data(), b.data().data(), v.data(), m, k, n);
    return make_op_node("matmul", {m, n}, std::move(v), {a, b},
                        [m, k, n](const NdArray& out) {
                            NdArray* pa = parent(out, 0);
                            NdArray* pb = parent(out, 1);
                            if (wants(pa)) {
                                prep(pa);  // dA += dC * B^T
                                mm_nt_acc(out.grad.data(), pb->value.data(), pa->grad.data(),
                                          m, n, k);
                            }
                            if (wants(pb)) {
                                prep(pb);  // dB += A^T * dC
                                mm_tn_acc(pa->value.data(), out.grad.data(), pb->grad.data(),
                                          k, m, n);
                            }
                        });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op_node("sum", {1}, {s}, {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        const double g = out.grad[0];
        for (auto& gv : p->grad) gv += g;
    });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / double(a.numel());
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op_node("mean", {1}, {s * inv}, {a}, [inv](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        const double g = out.grad[0] * inv;
        for (auto& gv : p->grad) gv += g;
    });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw Error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> v = a.data();
    return make_op_node("reshape", std::move(shape), std::move(v), {a}, [](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t i = 0; i < out.grad.size(); ++i) acc(p, i, out.grad[i]);
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw Error("transpose2d: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> v(m * n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[j * m + i] = av[i * n + j];
    return make_op_node("transpose", {n, m}, std::move(v), {a}, [m, n](const NdArray& out) {
        NdArray* p = parent(out, 0);
        prep(p);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < m; ++i) p->grad[i * n + j] += out.grad[j * m + i];
    });
}

namespace {

// Right-aligned broadcast: maps flat output index to flat source index.
struct BroadcastMap {
    Shape out_shape;
    std::vector<std::size_t> src_stride;  // per output axis; 0 on broadcast axes

    std::size_t map(std::size_t flat) const {
        std::size_t src = 0;
        for (std::size_t ax = out_shape.size(); ax-- > 0;) {
            const std::size_t d = out_shape[ax];
            src += (flat % d) * src_stride[ax];
            flat /= d;
        }
        return src;
    }
};

BroadcastMap make_broadcast_map(const Shape& from, const Shape& to) {
    if (from.size() > to.size()) {
        throw Error("broadcast: source rank exceeds target " + shape_str(from) + " -> " +
                    shape_str(to));
    }
    BroadcastMap bm;
    bm.out_shape = to;
    bm.src_stride.assign(to.size(), 0);
    // compute source strides right-aligned
    std::vector<std::size_t> strides(from.size());
    std::size_t acc_stride = 1;
    for (std::size_t i = from.size(); i-- > 0;) {
        strides[i] = acc_stride;
        acc_stride *= from[i];
    }
    const std::size_t off = to.size() - from.size();
    for (std::size_t i = 0; i < from.size(); ++i) {
        if (from[i] == to[off + i]) {
            bm.src_stride[off + i] = strides[i];
        } else if (from[i] == 1) {
            bm.src_stride[off + i] = 0;
        } else {
            throw Error("broadcast: dim " + std::to_string(from[i]) + " -> " +
                        std::to_string(to[off + i]) + " not allowed");
        }
    }
    return bm;
}

}  // namespace

Tensor broadcast_to(const Tensor& a, Shape shape) {
    if (a.shape() == shape) return a;
    BroadcastMap bm = make_broadcast_map(a.shape(), shape);
    const std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = av[bm.map(i)];
    return make_op_node("broadcast", std::move(shape), std::move(v), {a},
                        [bm](const NdArray& out) {
                            NdArray* p = parent(out, 0);
                            prep(p);
                            for (std::size_t i = 0; i < out.grad.size(); ++i)
                                p->grad[bm.map(i)] += out.grad[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw Error("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw Error("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& t : parts) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) throw Error("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != s0[i]) {
                throw Error("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
            }
        }
        axis_total += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<double> v(shape_numel(out_shape));
    std::vector<std::size_t> blocks;  // per-part axis*inner extent
    blocks.reserve(parts.size());
    for (const auto& t : parts) blocks.push_back(t.shape()[axis] * inner);
    const std::size_t out_block = axis_total * inner;

    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t pos = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const auto& src = parts[pi].data();
            std::memcpy(v.data() + o * out_block + pos, src.data() + o * blocks[pi],
                        blocks[pi] * sizeof(double));
            pos += blocks[pi];
        }
    }
    return make_op_node("concat", std::move(out_shape), std::move(v), parts,
                        [outer, blocks, out_block](const NdArray& out) {
                            for (std::size_t o = 0; o < outer; ++o) {
                                std::size_t pos = 0;
                                for (std::size_t pi = 0; pi < out.parents.size(); ++pi) {
                                    NdArray* p = out.parents[pi].get();
                                    if (wants(p)) {
                                        prep(p);
                                        const double* g = out.grad.data() + o * out_block + pos;
                                        double* pg = p->grad.data() + o * blocks[pi];
                                        for (std::size_t i = 0; i < blocks[pi]; ++i) pg[i] += g[i];
                                    }
                                    pos += blocks[pi];
                                }
                            }
                        });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t lo, std::size_t hi) {
    const Shape& s = a.shape();
    if (axis >= s.size() || lo >= hi || hi > s[axis]) {
        throw Error("slice: bad range [" + std::to_string(lo) + "," + std::to_string(hi) +
                    ") on axis " + std::to_string(axis) + " of " + shape_str(s));
    }
    Shape out_shape = s;
    out_shape[axis] = hi - lo;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t src_block = s[axis] * inner;
    const std::size_t dst_block = (hi - lo) * inner;

    std::vector<double> v(shape_numel(out_shape));
    const auto& av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(v.data() + o * dst_block, av.data() + o * src_block + lo * inner,
                    dst_block * sizeof(double));
    }
    return make_op_node("slice", std::move(out_shape), std::move(v), {a},
                        [outer, inner, lo, src_block, dst_block](const NdArray& out) {
                            NdArray* p = parent(out, 0);
                            prep(p);
                            for (std::size_t o = 0; o < outer; ++o) {
                                const double* g = out.grad.data() + o * dst_block;
                                double* pg = p->grad.data() + o * src_block + lo * inner;
                                for (std::size_t i = 0; i < dst_block; ++i) pg[i] += g[i];
                            }
                        });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.rank() != 2) throw Error("gather_rows: rank-2 tensor required");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    for (auto r : idx) {
        if (r >= rows) throw Error("gather_rows: index " + std::to_string(r) + " out of range");
    }
    std::vector<double> v(idx.size() * cols);
    const auto& av = a.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(v.data() + i * cols, av.data() + idx[i] * cols, cols * sizeof(double));
    }
    return make_op_node("gather", {idx.size(), cols}, std::move(v), {a},
                        [idx, cols](const NdArray& out) {
                            NdArray* p = parent(out, 0);
                            prep(p);
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                                const double* g = out.grad.data() + i * cols;
                                double* pg = p->grad.data() + idx[i] * cols;
                                for (std::size_t c = 0; c < cols; ++c) pg[c] += g[c];
                            }
                        });
}

// ---------------------------------------------------------------------------
// conv / upsample

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 4) throw Error("conv2d: x must be (C,H,W), w (O,C,kh,kw)");
    const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) throw Error("conv2d: channel mismatch");
    if (b.numel() != co) throw Error("conv2d: bias size mismatch");
    if (stride == 0) throw Error("conv2d: stride must be positive");
    if (h + 2 * pad < kh || wd + 2 * pad < kw) throw Error("conv2d: kernel larger than input");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;

    std::vector<double> v(co * ho * wo);
    const auto &xv = x.data(), &wv = w.data(), &bv = b.data();
    for (std::size_t oc = 0; oc < co; ++oc) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double s = bv[oc];
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const long iy = long(oy * stride + ky) - long(pad);
                        if (iy < 0 || iy >= long(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long ix = long(ox * stride + kx) - long(pad);
                            if (ix < 0 || ix >= long(wd)) continue;
                            s += xv[(ic * h + iy) * wd + ix] *
                                 wv[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                v[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    return make_op_node(
        "conv2d", {co, ho, wo}, std::move(v), {x, w, b},
        [ci, h, wd, co, kh, kw, ho, wo, stride, pad](const NdArray& out) {
            NdArray* px = parent(out, 0);
            NdArray* pw = parent(out, 1);
            NdArray* pb = parent(out, 2);
            const bool gx = wants(px), gw = wants(pw), gb = wants(pb);
            if (gx) prep(px);
            if (gw) prep(pw);
            if (gb) prep(pb);
            for (std::size_t oc = 0; oc < co; ++oc) {
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const double g = out.grad[(oc * ho + oy) * wo + ox];
                        if (g == 0.0) continue;
                        if (gb) pb->grad[oc] += g;
                        for (std::size_t ic = 0; ic < ci; ++ic) {
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                if (iy < 0 || iy >= long(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const long ix = long(ox * stride + kx) - long(pad);
                                    if (ix < 0 || ix >= long(wd)) continue;
                                    const std::size_t xi = (ic * h + iy) * wd + ix;
                                    const std::size_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                    if (gx) px->grad[xi] += g * pw->value[wi];
                                    if (gw) pw->grad[wi] += g * px->value[xi];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 3) throw Error("upsample_nearest2x: (C,H,W) required");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> v(c * 4 * h * w);
    const auto& xv = x.data();
    const std::size_t H = 2 * h, W = 2 * w;
    for (std::size_t ic = 0; ic < c; ++ic) {
        for (std::size_t y = 0; y < H; ++y) {
            const double* row = xv.data() + (ic * h + y / 2) * w;
            double* orow = v.data() + (ic * H + y) * W;
            for (std::size_t xo = 0; xo < W; ++xo) orow[xo] = row[xo / 2];
        }
    }
    return make_op_node("upsample2x", {c, H, W}, std::move(v), {x},
                        [c, h, w, H, W](const NdArray& out) {
                            NdArray* p = parent(out, 0);
                            prep(p);
                            for (std::size_t ic = 0; ic < c; ++ic) {
                                for (std::size_t y = 0; y < H; ++y) {
                                    const double* g = out.grad.data() + (ic * H + y) * W;
                                    double* pg = p->grad.data() + (ic * h + y / 2) * w;
                                    for (std::size_t xo = 0; xo < W; ++xo) pg[xo / 2] += g[xo];
                                }
                            }
                        });
}

// ---------------------------------------------------------------------------
// composites

Tensor rowsum(const Tensor& a) {
    if (a.rank() != 2) throw Error("rowsum: rank-2 tensor required");
    return matmul(a, Tensor::full({a.dim(1), 1}, 1.0));
}

Tensor rowmean(const Tensor& a) { return mul_scalar(rowsum(a), 1.0 / double(a.dim(1))); }

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 2) throw Error("softmax_rows: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    // Shift by detached row max; exact since softmax is shift-invariant.
    std::vector<double> mx(m, -1e300);
    const auto& av = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) mx[i] = std::max(mx[i], av[i * n + j]);
    Tensor shift = broadcast_to(Tensor::from_data({m, 1}, std::move(mx)), {m, n});
    Tensor e = exp(sub(a, shift));
    Tensor denom = broadcast_to(rowsum(e), {m, n});
    return div(e, denom);
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor clamp(const Tensor& a, double lo, double hi) {
    Tensor lo_t = Tensor::full(a.shape(), lo);
    Tensor hi_t = Tensor::full(a.shape(), hi);
    return minimum(maximum(a, lo_t), hi_t);
}

}  // namespace nsd
