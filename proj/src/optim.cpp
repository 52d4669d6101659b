#include "nsd/optim.hpp"

#include <cmath>

namespace nsd {

void Adam::add_param(const std::string& name, Tensor t, double lr_scale) {
    if (!t.requires_grad()) throw Error("Adam: param '" + name + "' does not require grad");
    Slot s;
    s.name = name;
    s.param = std::move(t);
    s.m.assign(s.param.numel(), 0.0);
    s.v.assign(s.param.numel(), 0.0);
    s.lr_scale = lr_scale;
    slots_.push_back(std::move(s));
}

void Adam::step() {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(step_));
    const double bc2 = 1.0 - std::pow(b2, double(step_));
    for (auto& s : slots_) {
        if (!s.param.has_grad()) {
            throw Error("Adam: missing grad for param '" + s.name + "'");
        }
        auto& p = s.param.data();
        const auto& g = s.param.raw()->grad;
        const double lr = cfg_.lr * s.lr_scale;
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (!std::isfinite(p[i])) {
                throw NumericError("Adam: non-finite update for param '" + s.name + "'");
            }
        }
        s.param.zero_grad();
    }
}

void Adam::quantize_f32() {
    for (auto& s : slots_) {
        for (auto& x : s.param.data()) x = double(float(x));
        for (auto& x : s.m) x = double(float(x));
        for (auto& x : s.v) x = double(float(x));
    }
}

double cosine_lr(double lr0, long step, long total, double floor_frac) {
    if (total <= 0) return lr0;
    const double t = std::min(1.0, double(step) / double(total));
    const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    return lr0 * (floor_frac + (1.0 - floor_frac) * c);
}

}  // namespace nsd
