#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nsd/common.hpp"
#include "nsd/rng.hpp"

namespace nsd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense f64 array plus reverse-mode tape fields. Leaves are parameters or
// inputs; interior nodes carry a backward closure that scatters this node's
// grad into its parents.
struct NdArray {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first backward / accumulation
    bool requires_grad = false;
    const char* op = "leaf";

    std::vector<std::shared_ptr<NdArray>> parents;
    std::function<void(const NdArray&)> backward_fn;

    // scratch for topological traversal
    long long visit_mark = 0;

    std::size_t numel() const { return value.size(); }
    bool is_scalar() const { return value.size() == 1; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantic handle to a shared node.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<NdArray> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->numel(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t rank() const { return n_->shape.size(); }

    std::vector<double>& data() { return n_->value; }
    const std::vector<double>& data() const { return n_->value; }
    double item() const;
    double at(std::size_t i) const { return n_->value[i]; }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }
    const std::vector<double>& grad() const;
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

    std::shared_ptr<NdArray> node() const { return n_; }
    NdArray* raw() const { return n_.get(); }

    // Detached copy of the values (constant leaf).
    Tensor detach() const;

  private:
    std::shared_ptr<NdArray> n_;
};

// Grad recording is on by default; NoGradGuard disables it per thread,
// so inference builds no tape.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Reverse pass from a scalar root. Accumulates into leaf grads; interior
// grads are scratch and reset per call.
void backward(const Tensor& root);

void check_finite(const std::vector<double>& v, const char* what);

// Op construction helper shared by ops.cpp.
Tensor make_op_node(const char* op, Shape shape, std::vector<double> value,
                    std::vector<Tensor> inputs,
                    std::function<void(const NdArray&)> backward_fn);

}  // namespace nsd
