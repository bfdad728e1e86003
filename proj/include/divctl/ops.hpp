#pragma once

#include <span>

#include "divctl/tensor.hpp"

// Differentiable tensor operations. Matrices are 2-D row-major; a "row batch"
// of tokens is (items * seq_len) x width with item-major row order.
namespace divctl {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// (m x k) * (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// x (n x in), w (out x in), optional b (out): x * w^T + b
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Adds vector b (cols) to every row of x.
Tensor add_row(const Tensor& x, const Tensor& b);
// Each row of x repeated `times` times consecutively.
Tensor repeat_rows(const Tensor& x, std::size_t times);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor layer_norm(const Tensor& x, double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
// Row-wise softmax over the last dimension (a 1-D tensor is one row).
// Throws InvalidInput on non-finite entries.
Tensor softmax(const Tensor& x);

// Multi-head scaled dot-product self-attention without projections, applied
// independently to each block of `seq_len` rows.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads = 1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
// mean((a - b)^2) over all elements
Tensor mse_loss(const Tensor& a, const Tensor& b);
// Cosine similarity of corresponding rows; a zero-norm row yields 0 with zero gradient.
Tensor row_cosine(const Tensor& a, const Tensor& b);

// U (o x r), s (r), V (i x r) -> U diag(s) V^T, with optional per-component
// coefficients c (r elements): U diag(s * c) V^T. Components whose effective
// scale is exactly zero are skipped, so their factor gradients are exactly zero.
Tensor scaled_outer(const Tensor& u, const Tensor& s, const Tensor& v);
Tensor scaled_outer(const Tensor& u, const Tensor& s, const Tensor& v, const Tensor& c);

}  // namespace divctl

namespace divctl {

struct CosineResult {
    double value = 0.0;
    bool degenerate = false;  // both inputs had zero norm
};

// Plain cosine similarity of two equal-length vectors, clamped to [-1, 1].
// Zero-norm inputs give 0; `degenerate` is set when both norms are zero.
CosineResult cosine_similarity(std::span<const double> a, std::span<const double> b);

// RAII switch that makes every op return constants (no tape) on this thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace divctl
