#include "nsd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nsd {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = std::make_shared<NdArray>();
    n->value.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    auto n = std::make_shared<NdArray>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw Error("from_data: shape " + shape_str(shape) + " does not match data size " +
                    std::to_string(data.size()));
    }
    check_finite(data, "tensor literal");
    auto n = std::make_shared<NdArray>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = std::make_shared<NdArray>();
    n->value.resize(shape_numel(shape));
    rng.fill_normal(n->value, 0.0, stddev);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

double Tensor::item() const {
    if (!n_->is_scalar()) {
        throw Error("item() on non-scalar tensor " + shape_str(n_->shape));
    }
    return n_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    if (n_->grad.empty()) {
        throw Error("grad accessed before backward (param never reached by tape?)");
    }
    return n_->grad;
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<NdArray>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
}

Tensor make_op_node(const char* op, Shape shape, std::vector<double> value,
                    std::vector<Tensor> inputs,
                    std::function<void(const NdArray&)> backward_fn) {
    if (shape_numel(shape) != value.size()) {
        throw Error(std::string(op) + ": output shape/value mismatch");
    }
    check_finite(value, op);
    auto n = std::make_shared<NdArray>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool any_grad = false;
    for (const auto& t : inputs) any_grad = any_grad || t.requires_grad();
    if (any_grad && grad_enabled()) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

void backward(const Tensor& root) {
    NdArray* r = root.raw();
    if (!r->is_scalar()) {
        throw Error("backward: root must be scalar, got " + shape_str(r->shape));
    }
    if (!r->requires_grad) {
        throw Error("backward: root does not require grad");
    }

    // Iterative DFS to collect topological order (children after parents).
    static thread_local long long pass = 0;
    const long long mark = ++pass;
    std::vector<NdArray*> order;
    std::vector<std::pair<NdArray*, std::size_t>> stack;
    stack.emplace_back(r, 0);
    r->visit_mark = mark;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NdArray* p = node->parents[idx++].get();
            if (p->visit_mark != mark && p->requires_grad) {
                p->visit_mark = mark;
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is now parents-before-children; walk in reverse.

    // Interior grads are scratch: reset them. Leaf (no backward_fn) grads
    // persist so repeated backward calls accumulate.
    for (NdArray* n : order) {
        if (n->backward_fn) {
            n->grad.assign(n->value.size(), 0.0);
        } else {
            n->ensure_grad();
        }
    }
    if (r->backward_fn) {
        r->grad.assign(1, 1.0);
    } else {
        r->ensure_grad();
        r->grad[0] += 1.0;
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NdArray* n = *it;
        if (!n->backward_fn) continue;
        n->backward_fn(*n);
    }
    for (NdArray* n : order) {
        for (double g : n->grad) {
            if (!std::isfinite(g)) {
                throw NumericError(std::string("non-finite gradient at op ") + n->op);
            }
        }
    }
}

}  // namespace nsd
