#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "opcrash/numcore/autodiff.hpp"

namespace opcrash::numcore {

// Differentiable operations on rank-2 tensors unless noted. Every op checks
// extents and throws DimensionError on mismatch.

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// aᵀ·b without materialising aᵀ.
template <typename T> Var<T> matmul_tn(const Var<T>& a, const Var<T>& b);
/// a·bᵀ.
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);

/// x·W + b with b a 1×out row broadcast over rows; `bias` may be invalid.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
/// scale·a + shift with constant scalars.
template <typename T> Var<T> affine(const Var<T>& a, T scale, T shift = T{0});
/// Multiplies column j by the constant factors[j].
template <typename T> Var<T> scale_cols(const Var<T>& a, std::span<const T> factors);
/// s·a where s is a 1×1 variable.
template <typename T> Var<T> mul_scalar(const Var<T>& s, const Var<T>& a);

template <typename T> Var<T> sigmoid(const Var<T>& a);
/// tanh approximation of GELU.
template <typename T> Var<T> gelu(const Var<T>& a);

/// Max-stabilised softmax; axis 0 normalises columns, axis 1 rows.
/// Throws NumericError on non-finite input.
template <typename T> Var<T> softmax(const Var<T>& a, std::size_t axis);
/// Divides each column by its sum over rows.
template <typename T> Var<T> column_normalize(const Var<T>& a);
/// Row-wise normalisation with ε = 1e-5, then gain/bias (1×C each).
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias);

template <typename T> Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t width);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// Reductions to a 1×1 result.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> sum_squares(const Var<T>& a);
/// Euclidean norm of all entries; the gradient at zero is taken as zero.
template <typename T> Var<T> l2_norm(const Var<T>& a);

/// Multi-head scaled dot-product attention softmax(q·kᵀ/√d)·v with the
/// channels of q/k and of v split evenly into `heads` groups. Keeps only the
/// output and one log-sum-exp per (query row, head); the backward pass
/// recomputes probabilities one query row at a time, so no Nq×Nk buffer is
/// held.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads);

}  // namespace opcrash::numcore
