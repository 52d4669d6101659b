#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nsd/ops.hpp"
#include "nsd/rng.hpp"

namespace nsd {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
    Tensor w;  // (in, out)
    Tensor b;  // (1, out)

    static Linear create(std::size_t in, std::size_t out, Rng& rng, double w_std = -1.0) {
        Linear l;
        const double s = w_std > 0 ? w_std : std::sqrt(2.0 / double(in));
        l.w = Tensor::randn({in, out}, rng, s, true);
        l.b = Tensor::zeros({1, out}, true);
        return l;
    }

    Tensor forward(const Tensor& x) const {
        Tensor y = matmul(x, w);
        return add(y, broadcast_to(b, y.shape()));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }

    void set_requires_grad(bool v) {
        w.set_requires_grad(v);
        b.set_requires_grad(v);
    }
};

}  // namespace nsd
