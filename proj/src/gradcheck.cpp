#include "nsd/gradcheck.hpp"

#include <cmath>

namespace nsd {

double grad_check(const std::function<Tensor()>& f, Tensor theta, double delta) {
    if (delta <= 0.0) throw Error("grad_check: delta must be positive");
    theta.set_requires_grad(true);
    theta.zero_grad();
    {
        Tensor loss = f();
        if (loss.numel() != 1) throw Error("grad_check: f must return a scalar");
        backward(loss);
    }
    std::vector<double> analytic = theta.grad();

    auto eval = [&]() {
        NoGradGuard ng;
        Tensor loss = f();
        const double v = loss.item();
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite probe value");
        return v;
    };

    double worst = 0.0;
    auto& data = theta.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double keep = data[i];
        data[i] = keep + delta;
        const double fp = eval();
        data[i] = keep - delta;
        const double fm = eval();
        data[i] = keep;
        const double numeric = (fp - fm) / (2.0 * delta);
        const double err = std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + delta);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace nsd
