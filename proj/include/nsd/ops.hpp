#pragma once

#include <cstddef>
#include <vector>

#include "nsd/tensor.hpp"

namespace nsd {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

// Scalar variants.
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Unary.
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a, double beta = 1.0);

// 2D matrix product (m,k)x(k,n) -> (m,n).
Tensor matmul(const Tensor& a, const Tensor& b);

// Reductions to scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Shape ops.
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
Tensor broadcast_to(const Tensor& a, Shape shape);  // numpy-style, right-aligned
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t lo, std::size_t hi);

// Row gather on a 2D tensor: rows[i] = a[idx[i], :]. Backward scatter-adds.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);

// conv2d: x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout). Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);

// Nearest-neighbour 2x upsample of (C,H,W).
Tensor upsample_nearest2x(const Tensor& x);

// Composites (no backward rule of their own).
Tensor rowsum(const Tensor& a);         // (m,n) -> (m,1)
Tensor rowmean(const Tensor& a);        // (m,n) -> (m,1)
Tensor softmax_rows(const Tensor& a);   // (m,n) row-wise, shift-stabilized
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Raw matmul kernels, shared with non-autograd code paths.
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);                 // C = A(m,k) B(k,n)
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);                 // C = A(m,k) B(n,k)^T
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);                 // C = A(k,m)^T B(k,n)
void mm_nn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);             // C += A B
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);

}  // namespace nsd
