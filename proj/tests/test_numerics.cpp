#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "nsd/gradcheck.hpp"
#include "nsd/ops.hpp"
#include "nsd/optim.hpp"
#include "nsd/rng.hpp"
#include "nsd/tensor.hpp"

using namespace nsd;

namespace {

// Random values kept away from kinks/ties so finite differences are clean.
Tensor rand_tensor(Shape shape, Rng& rng, double lo = 0.2, double hi = 1.5) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
        if (rng.bernoulli(0.5)) x = -x;
    }
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor rand_positive(Shape shape, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(0.5, 2.0);
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Projects an op output to a scalar with fixed random weights so every
// output entry influences the loss.
double check_unary(const std::function<Tensor(const Tensor&)>& op, Tensor x, Rng& rng) {
    Tensor proj;
    {
        NoGradGuard ng;
        proj = rand_tensor(op(x).shape(), rng);
    }
    x.set_requires_grad(true);
    return grad_check([&]() { return sum(mul(op(x), proj)); }, x, 1e-4);
}

double check_binary(const std::function<Tensor(const Tensor&, const Tensor&)>& op, Tensor a,
                    Tensor b, Rng& rng) {
    Tensor proj;
    {
        NoGradGuard ng;
        proj = rand_tensor(op(a, b).shape(), rng);
    }
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto loss = [&]() { return sum(mul(op(a, b), proj)); };
    return std::max(grad_check(loss, a, 1e-4), grad_check(loss, b, 1e-4));
}

}  // namespace

TEST_CASE("sum of squares gradient") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor L = sum(mul(x, x));
    backward(L);
    CHECK(L.item() == doctest::Approx(14.0));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("matmul by identity: grad of B is all-ones") {
    Tensor A = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor B = Tensor::from_data({2, 2}, {3, -1, 2, 7}, true);
    Tensor L = sum(matmul(A, B));
    backward(L);
    for (double g : B.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("3-layer MLP grads match central differences to 1e-6") {
    Rng rng(42);
    const std::size_t in = 4, hid = 6, out = 3, n = 5;
    Tensor x = rand_tensor({n, in}, rng);
    Tensor w1 = Tensor::randn({in, hid}, rng, 0.5, true);
    Tensor b1 = Tensor::randn({1, hid}, rng, 0.1, true);
    Tensor w2 = Tensor::randn({hid, hid}, rng, 0.5, true);
    Tensor b2 = Tensor::randn({1, hid}, rng, 0.1, true);
    Tensor w3 = Tensor::randn({hid, out}, rng, 0.5, true);
    Tensor b3 = Tensor::randn({1, out}, rng, 0.1, true);

    auto loss = [&]() {
        Tensor h1 = tanh(add(matmul(x, w1), broadcast_to(b1, {n, hid})));
        Tensor h2 = tanh(add(matmul(h1, w2), broadcast_to(b2, {n, hid})));
        Tensor y = add(matmul(h2, w3), broadcast_to(b3, {n, out}));
        return mean(mul(y, y));
    };
    for (Tensor t : {w1, b1, w2, b2, w3, b3}) {
        CHECK(grad_check(loss, t, 1e-4) < 1e-6);
    }
}

TEST_CASE("grad_check exact on linear and quadratic") {
    Tensor x = Tensor::from_data({4}, {0.3, -0.7, 1.1, 0.5}, true);
    Tensor c = Tensor::from_data({4}, {2.0, -1.0, 0.5, 3.0});
    CHECK(grad_check([&]() { return sum(mul(x, c)); }, x, 1e-4) < 1e-10);
    CHECK(grad_check([&]() { return sum(mul(x, x)); }, x, 1e-4) < 1e-9);
}

TEST_CASE("gradient accumulation doubles without zeroing") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    auto build = [&]() { return sum(mul(x, x)); };
    Tensor L1 = build();
    backward(L1);
    std::vector<double> g1 = x.grad();
    Tensor L2 = build();
    backward(L2);
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(x.grad()[i] == 2.0 * g1[i]);  // exact doubling
    }
    x.zero_grad();
    Tensor L3 = build();
    backward(L3);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == g1[i]);
}

TEST_CASE("backward rejects non-scalar roots and NaN") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), Error);
    CHECK_THROWS_AS(log(Tensor::from_data({1}, {-1.0}, true)), NumericError);
}

TEST_CASE("every registered op passes grad_check below 1e-4") {
    Rng rng(7);
    double worst = 0.0;
    auto track = [&](double e) {
        worst = std::max(worst, e);
        CHECK(e < 1e-4);
    };

    track(check_binary([](auto& a, auto& b) { return add(a, b); }, rand_tensor({3, 4}, rng),
                       rand_tensor({3, 4}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return sub(a, b); }, rand_tensor({5}, rng),
                       rand_tensor({5}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return mul(a, b); }, rand_tensor({2, 3}, rng),
                       rand_tensor({2, 3}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return div(a, b); }, rand_tensor({2, 3}, rng),
                       rand_positive({2, 3}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return maximum(a, b); }, rand_tensor({4, 4}, rng),
                       rand_tensor({4, 4}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return minimum(a, b); }, rand_tensor({4, 4}, rng),
                       rand_tensor({4, 4}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return matmul(a, b); }, rand_tensor({3, 5}, rng),
                       rand_tensor({5, 2}, rng), rng));

    track(check_unary([](auto& a) { return add_scalar(a, 0.7); }, rand_tensor({6}, rng), rng));
    track(check_unary([](auto& a) { return mul_scalar(a, -1.3); }, rand_tensor({6}, rng), rng));
    track(check_unary([](auto& a) { return exp(a); }, rand_tensor({3, 3}, rng), rng));
    track(check_unary([](auto& a) { return log(a); }, rand_positive({3, 3}, rng), rng));
    track(check_unary([](auto& a) { return sqrt(a); }, rand_positive({3, 3}, rng), rng));
    track(check_unary([](auto& a) { return abs(a); }, rand_tensor({7}, rng), rng));
    track(check_unary([](auto& a) { return tanh(a); }, rand_tensor({4, 2}, rng), rng));
    track(check_unary([](auto& a) { return relu(a); }, rand_tensor({8}, rng), rng));
    track(check_unary([](auto& a) { return softplus(a, 1.0); }, rand_tensor({8}, rng), rng));
    track(check_unary([](auto& a) { return softplus(a, 100.0); }, rand_tensor({8}, rng), rng));
    track(check_unary([](auto& a) { return sum(a); }, rand_tensor({3, 4}, rng), rng));
    track(check_unary([](auto& a) { return mean(a); }, rand_tensor({3, 4}, rng), rng));
    track(check_unary([](auto& a) { return reshape(a, {4, 3}); }, rand_tensor({3, 4}, rng), rng));
    track(check_unary([](auto& a) { return transpose2d(a); }, rand_tensor({3, 4}, rng), rng));
    track(check_unary([](auto& a) { return broadcast_to(a, {5, 4}); }, rand_tensor({1, 4}, rng),
                      rng));
    track(check_unary([](auto& a) { return broadcast_to(a, {2, 3, 4}); },
                      rand_tensor({3, 1}, rng), rng));
    track(check_unary([](auto& a) { return slice(a, 1, 1, 3); }, rand_tensor({4, 5}, rng), rng));
    track(check_unary(
        [](auto& a) {
            return gather_rows(a, {2, 0, 2, 1});
        },
        rand_tensor({3, 4}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return concat({a, b}, 0); },
                       rand_tensor({2, 3}, rng), rand_tensor({4, 3}, rng), rng));
    track(check_binary([](auto& a, auto& b) { return concat({a, b}, 1); },
                       rand_tensor({2, 3}, rng), rand_tensor({2, 2}, rng), rng));

    {
        Tensor x = rand_tensor({2, 6, 6}, rng);
        Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.4, true);
        Tensor b = Tensor::randn({3}, rng, 0.1, true);
        x.set_requires_grad(true);
        Tensor proj;
        {
            NoGradGuard ng;
            proj = rand_tensor(conv2d(x, w, b, 2, 1).shape(), rng);
        }
        auto loss = [&]() { return sum(mul(conv2d(x, w, b, 2, 1), proj)); };
        track(grad_check(loss, x, 1e-4));
        track(grad_check(loss, w, 1e-4));
        track(grad_check(loss, b, 1e-4));
    }
    track(check_unary([](auto& a) { return upsample_nearest2x(a); }, rand_tensor({2, 3, 3}, rng),
                      rng));
    track(check_unary([](auto& a) { return softmax_rows(a); }, rand_tensor({3, 5}, rng), rng));

    MESSAGE("worst op grad_check error: " << worst);
}

TEST_CASE("adam: zero gradient leaves params unchanged") {
    Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    Adam opt({.lr = 0.1});
    opt.add_param("p", p);
    p.zero_grad();
    opt.step();
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);
    CHECK(p.data()[2] == 0.5);
}

TEST_CASE("adam: bias-corrected unit first step") {
    Tensor p = Tensor::from_data({1}, {2.0}, true);
    Adam opt({.lr = 0.1});
    opt.add_param("p", p);
    p.zero_grad();
    p.raw()->grad[0] = 1.0;
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(1.9).epsilon(1e-6));
}

TEST_CASE("adam: missing grad is an error") {
    Tensor p = Tensor::from_data({2}, {0.0, 0.0}, true);
    Adam opt({.lr = 0.1});
    opt.add_param("p", p);
    CHECK_THROWS_AS(opt.step(), Error);
}

TEST_CASE("adam converges on (x-3)^2 in 1000 steps") {
    Tensor x = Tensor::scalar(-4.0, true);
    Adam opt({.lr = 0.05});
    opt.add_param("x", x);
    for (int i = 0; i < 1000; ++i) {
        Tensor d = add_scalar(x, -3.0);
        Tensor L = mul(d, d);
        backward(L);
        opt.step();
    }
    CHECK(std::fabs(x.item() - 3.0) < 1e-3);
}

TEST_CASE("determinism: identical seeds give bit-identical runs") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor w = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor x = Tensor::randn({8, 4}, rng);
        Adam opt({.lr = 1e-2});
        opt.add_param("w", w);
        for (int i = 0; i < 20; ++i) {
            Tensor y = tanh(matmul(x, w));
            Tensor L = mean(mul(y, y));
            backward(L);
            opt.step();
        }
        return w.data();
    };
    auto a = run(123), b = run(123);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    auto c = run(124);
    CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) != 0);
}

TEST_CASE("rng streams are independent and reproducible") {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng base(9);
    Rng c1 = base.derive("jobs").derive(std::uint64_t(1));
    Rng c2 = base.derive("jobs").derive(std::uint64_t(2));
    CHECK(c1.next_u64() != c2.next_u64());
    // uniform stays in [0,1)
    Rng u(77);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}
