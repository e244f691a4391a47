// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels used by the transformer. Two implementations share one
// signature set: `kernels::` (BLAS GEMM + OpenMP loops, used everywhere in
// the library) and `kernels::reference::` (plain serial loops, kept for
// tests and the benchmark). All matrices are row-major.
//
// Reductions over rows are partitioned by column so results do not depend
// on the thread count.

namespace vrgbx::kernels {

/// C = alpha * op(A) * op(B) + beta * C, with op(X) = X or X^T.
template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Real alpha, const Real* a, int lda,
          const Real* b, int ldb, Real beta, Real* c, int ldc);

/// y[r][c] += bias[c]
template <typename Real>
void add_bias_rows(Real* y, const Real* bias, int rows, int cols);

/// out[c] += sum_r x[r][c]
template <typename Real>
void accumulate_column_sums(const Real* x, int rows, int cols, Real* out);

/// Affine-free layer norm over the last axis. Stores the normalized output,
/// and per-row mean and reciprocal standard deviation.
template <typename Real>
void layer_norm_forward(const Real* x, int rows, int cols, Real eps, Real* y, Real* mean, Real* rstd);

/// dx += rstd * (dy - mean(dy) - y * mean(dy * y)), y the normalized output.
template <typename Real>
void layer_norm_backward(const Real* dy, const Real* y, const Real* rstd, int rows, int cols, Real* dx);

/// y = xn * (1 + scale) + shift, shift/scale broadcast over rows.
template <typename Real>
void modulate_forward(const Real* xn, const Real* shift, const Real* scale, int rows, int cols, Real* y);

/// dxn = dy * (1 + scale); dshift += colsum(dy); dscale += colsum(dy * xn).
template <typename Real>
void modulate_backward(const Real* dy, const Real* xn, const Real* scale, int rows, int cols, Real* dxn,
                       Real* dshift, Real* dscale);

/// Row-wise softmax in place.
template <typename Real>
void softmax_rows(Real* s, int rows, int cols);

/// In place: dp <- p * (dp - rowsum(dp * p)).
template <typename Real>
void softmax_backward_rows(const Real* p, Real* dp, int rows, int cols);

/// tanh-approximated GELU.
template <typename Real>
void gelu_forward(const Real* x, Real* y, long n);
template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, long n);

template <typename Real>
void silu_forward(const Real* x, Real* y, long n);
template <typename Real>
void silu_backward(const Real* x, const Real* dy, Real* dx, long n);

/// h += gate * y, gate broadcast over rows.
template <typename Real>
void gated_residual_forward(Real* h, const Real* gate, const Real* y, int rows, int cols);

/// dy = gate * dh; dgate += colsum(dh * y).
template <typename Real>
void gated_residual_backward(const Real* dh, const Real* gate, const Real* y, int rows, int cols, Real* dy,
                             Real* dgate);

namespace reference {

template <typename Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Real alpha, const Real* a, int lda,
          const Real* b, int ldb, Real beta, Real* c, int ldc);
template <typename Real>
void add_bias_rows(Real* y, const Real* bias, int rows, int cols);
template <typename Real>
void accumulate_column_sums(const Real* x, int rows, int cols, Real* out);
template <typename Real>
void layer_norm_forward(const Real* x, int rows, int cols, Real eps, Real* y, Real* mean, Real* rstd);
template <typename Real>
void layer_norm_backward(const Real* dy, const Real* y, const Real* rstd, int rows, int cols, Real* dx);
template <typename Real>
void modulate_forward(const Real* xn, const Real* shift, const Real* scale, int rows, int cols, Real* y);
template <typename Real>
void modulate_backward(const Real* dy, const Real* xn, const Real* scale, int rows, int cols, Real* dxn,
                       Real* dshift, Real* dscale);
template <typename Real>
void softmax_rows(Real* s, int rows, int cols);
template <typename Real>
void softmax_backward_rows(const Real* p, Real* dp, int rows, int cols);
template <typename Real>
void gelu_forward(const Real* x, Real* y, long n);
template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, long n);
template <typename Real>
void silu_forward(const Real* x, Real* y, long n);
template <typename Real>
void silu_backward(const Real* x, const Real* dy, Real* dx, long n);
template <typename Real>
void gated_residual_forward(Real* h, const Real* gate, const Real* y, int rows, int cols);
template <typename Real>
void gated_residual_backward(const Real* dh, const Real* gate, const Real* y, int rows, int cols, Real* dy,
                             Real* dgate);

}  // namespace reference

/// Pins OpenMP and BLAS to a fixed thread count (deterministic mode).
void set_thread_count(int threads);

}  // namespace vrgbx::kernels
