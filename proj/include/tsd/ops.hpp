#pragma once

#include <span>
#include <vector>

#include "tsd/tensor.hpp"

TSD_NAMESPACE_BEGIN

// Differentiable primitives. Every op checks shapes and throws ShapeError on
// mismatch; gradients flow to every operand that requires one.

Tensor matmul(const Tensor& a, const Tensor& b);
// x[N×in] · weightᵀ + bias, weight stored [out×in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);
// Elementwise product with a constant (non-differentiable) array of equal size.
Tensor mul_const(const Tensor& a, std::span<const Real> factors);

// max(0, x); the subgradient at 0 is 0.
Tensor relu(const Tensor& x);
// 0.5·x²/beta for |x| < beta, |x| − 0.5·beta otherwise.
Tensor smooth_l1(const Tensor& x, Real beta = 1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Concatenates along the leading axis; trailing dimensions must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);
// Picks x.data()[indices[i]] into a rank-1 tensor.
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);

Tensor softmax_rows(const Tensor& logits);
// Per-row −log softmax(logits)[label]. logits may be [C] (one row) or [N×C];
// the result has one entry per row. Labels outside [0, C) throw out_of_range.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor softmax_cross_entropy(const Tensor& logits, int label);

// Bilinear read of map[H×W×C] at continuous (x, y); x indexes columns. Corners
// outside the map read as zero. Differentiable w.r.t. the map and both
// coordinates (scalar tensors).
Tensor bilinear_sample(const Tensor& map, const Tensor& x, const Tensor& y);

// Zero-padded 2-D convolution over an H×W×Cin map with weight
// [Cout×kh×kw×Cin] and bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

TSD_NAMESPACE_END
