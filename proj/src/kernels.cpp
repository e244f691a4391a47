// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace vrgbx::kernels {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename Real>
inline Real gelu_value(Real x) {
    const Real u = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <typename Real>
inline Real gelu_derivative(Real x) {
    const Real u = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
    const Real th = std::tanh(u);
    const Real du = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * x * x);
    return Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
}

template <typename Real>
inline Real sigmoid(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

// Vectorizable exp over a block: Cody-Waite range reduction with a degree-6
// polynomial, within 2 ulp of std::exp over the clamped range. The 2^n scale
// is built through an integer buffer so every loop stays branch-free.
constexpr int kExpBlock = 256;

inline void exp_block(const float* x, float* y, int n) {
    alignas(64) std::int32_t bits[kExpBlock];
    alignas(64) float scale[kExpBlock];
    for (int i = 0; i < n; ++i) {
        const float v = std::min(88.3762626647949f, std::max(-87.3365447505531f, x[i]));
        const float k = std::floor(v * 1.44269504088896341f + 0.5f);
        float r = v - k * 0.693359375f;
        r -= k * -2.12194440e-4f;
        float p = 1.9875691500e-4f;
        p = p * r + 1.3981999507e-3f;
        p = p * r + 8.3334519073e-3f;
        p = p * r + 4.1665795894e-2f;
        p = p * r + 1.6666665459e-1f;
        p = p * r + 5.0000001201e-1f;
        y[i] = p * r * r + r + 1.0f;
        bits[i] = (static_cast<std::int32_t>(k) + 127) << 23;
    }
    std::memcpy(scale, bits, sizeof(float) * n);
    for (int i = 0; i < n; ++i) y[i] *= scale[i];
}

inline void exp_block(const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

/// y[i] = exp(x[i]) for any length (x and y may alias).
template <typename Real>
void exp_span(const Real* x, Real* y, long n) {
    for (long i = 0; i < n; i += kExpBlock) exp_block(x + i, y + i, static_cast<int>(std::min<long>(kExpBlock, n - i)));
}

/// tanh-GELU value and derivative over a block, with tanh(u) = 1 - 2/(exp(2u)+1).
template <typename Real>
void gelu_block(const Real* x, Real* y, Real* dydx, int n) {
    alignas(64) Real e[kExpBlock];
    for (int i = 0; i < n; ++i) e[i] = Real(2 * kGeluC) * (x[i] + Real(kGeluA) * x[i] * x[i] * x[i]);
    exp_block(e, e, n);
    for (int i = 0; i < n; ++i) {
        const Real th = Real(1) - Real(2) / (e[i] + Real(1));
        if (y) y[i] = Real(0.5) * x[i] * (Real(1) + th);
        if (dydx) {
            const Real du = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * x[i] * x[i]);
            dydx[i] = Real(0.5) * (Real(1) + th) + Real(0.5) * x[i] * (Real(1) - th * th) * du;
        }
    }
}

inline CBLAS_TRANSPOSE op(bool t) { return t ? CblasTrans : CblasNoTrans; }

// Column blocks for deterministic reductions over rows.
template <typename Fn>
void for_column_blocks(int cols, Fn&& fn) {
    constexpr int kBlock = 16;
    const int blocks = (cols + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
    for (int b = 0; b < blocks; ++b) {
        fn(b * kBlock, std::min(cols, (b + 1) * kBlock));
    }
}

}  // namespace

template <>
void gemm<float>(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
                 int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, op(ta), op(tb), m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, op(ta), op(tb), m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename Real>
void add_bias_rows(Real* y, const Real* bias, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        Real* row = y + static_cast<long>(r) * cols;
        for (int c = 0; c < cols; ++c) row[c] += bias[c];
    }
}

template <typename Real>
void accumulate_column_sums(const Real* x, int rows, int cols, Real* out) {
    for_column_blocks(cols, [&](int c0, int c1) {
        for (int r = 0; r < rows; ++r) {
            const Real* row = x + static_cast<long>(r) * cols;
            for (int c = c0; c < c1; ++c) out[c] += row[c];
        }
    });
}

template <typename Real>
void layer_norm_forward(const Real* x, int rows, int cols, Real eps, Real* y, Real* mean, Real* rstd) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* xr = x + static_cast<long>(r) * cols;
        Real* yr = y + static_cast<long>(r) * cols;
        Real mu = 0;
        for (int c = 0; c < cols; ++c) mu += xr[c];
        mu /= cols;
        Real var = 0;
        for (int c = 0; c < cols; ++c) {
            const Real d = xr[c] - mu;
            var += d * d;
        }
        var /= cols;
        const Real rs = Real(1) / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs;
        mean[r] = mu;
        rstd[r] = rs;
    }
}

template <typename Real>
void layer_norm_backward(const Real* dy, const Real* y, const Real* rstd, int rows, int cols, Real* dx) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* dyr = dy + static_cast<long>(r) * cols;
        const Real* yr = y + static_cast<long>(r) * cols;
        Real* dxr = dx + static_cast<long>(r) * cols;
        Real mean_dy = 0;
        Real mean_dyy = 0;
        for (int c = 0; c < cols; ++c) {
            mean_dy += dyr[c];
            mean_dyy += dyr[c] * yr[c];
        }
        mean_dy /= cols;
        mean_dyy /= cols;
        for (int c = 0; c < cols; ++c) dxr[c] += rstd[r] * (dyr[c] - mean_dy - yr[c] * mean_dyy);
    }
}

template <typename Real>
void modulate_forward(const Real* xn, const Real* shift, const Real* scale, int rows, int cols, Real* y) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* xr = xn + static_cast<long>(r) * cols;
        Real* yr = y + static_cast<long>(r) * cols;
        for (int c = 0; c < cols; ++c) yr[c] = xr[c] * (Real(1) + scale[c]) + shift[c];
    }
}

template <typename Real>
void modulate_backward(const Real* dy, const Real* xn, const Real* scale, int rows, int cols, Real* dxn,
                       Real* dshift, Real* dscale) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* dyr = dy + static_cast<long>(r) * cols;
        Real* dxr = dxn + static_cast<long>(r) * cols;
        for (int c = 0; c < cols; ++c) dxr[c] = dyr[c] * (Real(1) + scale[c]);
    }
    for_column_blocks(cols, [&](int c0, int c1) {
        for (int r = 0; r < rows; ++r) {
            const Real* dyr = dy + static_cast<long>(r) * cols;
            const Real* xr = xn + static_cast<long>(r) * cols;
            for (int c = c0; c < c1; ++c) {
                dshift[c] += dyr[c];
                dscale[c] += dyr[c] * xr[c];
            }
        }
    });
}

template <typename Real>
void softmax_rows(Real* s, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        Real* row = s + static_cast<long>(r) * cols;
        Real mx = row[0];
#pragma omp simd reduction(max : mx)
        for (int c = 1; c < cols; ++c) mx = row[c] > mx ? row[c] : mx;
        for (int c = 0; c < cols; ++c) row[c] -= mx;
        exp_span(row, row, cols);
        Real sum = 0;
#pragma omp simd reduction(+ : sum)
        for (int c = 0; c < cols; ++c) sum += row[c];
        const Real inv = Real(1) / sum;
        for (int c = 0; c < cols; ++c) row[c] *= inv;
    }
}

template <typename Real>
void softmax_backward_rows(const Real* p, Real* dp, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* pr = p + static_cast<long>(r) * cols;
        Real* dr = dp + static_cast<long>(r) * cols;
        Real dot = 0;
        for (int c = 0; c < cols; ++c) dot += pr[c] * dr[c];
        for (int c = 0; c < cols; ++c) dr[c] = pr[c] * (dr[c] - dot);
    }
}

template <typename Real>
void gelu_forward(const Real* x, Real* y, long n) {
    const long blocks = (n + kExpBlock - 1) / kExpBlock;
#pragma omp parallel for schedule(static)
    for (long b = 0; b < blocks; ++b) {
        const long i = b * kExpBlock;
        gelu_block<Real>(x + i, y + i, nullptr, static_cast<int>(std::min<long>(kExpBlock, n - i)));
    }
}

template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, long n) {
    const long blocks = (n + kExpBlock - 1) / kExpBlock;
#pragma omp parallel for schedule(static)
    for (long b = 0; b < blocks; ++b) {
        const long i = b * kExpBlock;
        const int len = static_cast<int>(std::min<long>(kExpBlock, n - i));
        gelu_block<Real>(x + i, nullptr, dx + i, len);
        for (int j = 0; j < len; ++j) dx[i + j] *= dy[i + j];
    }
}

template <typename Real>
void silu_forward(const Real* x, Real* y, long n) {
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

template <typename Real>
void silu_backward(const Real* x, const Real* dy, Real* dx, long n) {
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) {
        const Real s = sigmoid(x[i]);
        dx[i] = dy[i] * (s + x[i] * s * (Real(1) - s));
    }
}

template <typename Real>
void gated_residual_forward(Real* h, const Real* gate, const Real* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        Real* hr = h + static_cast<long>(r) * cols;
        const Real* yr = y + static_cast<long>(r) * cols;
        for (int c = 0; c < cols; ++c) hr[c] += gate[c] * yr[c];
    }
}

template <typename Real>
void gated_residual_backward(const Real* dh, const Real* gate, const Real* y, int rows, int cols, Real* dy,
                             Real* dgate) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const Real* dhr = dh + static_cast<long>(r) * cols;
        Real* dyr = dy + static_cast<long>(r) * cols;
        for (int c = 0; c < cols; ++c) dyr[c] = gate[c] * dhr[c];
    }
    for_column_blocks(cols, [&](int c0, int c1) {
        for (int r = 0; r < rows; ++r) {
            const Real* dhr = dh + static_cast<long>(r) * cols;
            const Real* yr = y + static_cast<long>(r) * cols;
            for (int c = c0; c < c1; ++c) dgate[c] += dhr[c] * yr[c];
        }
    });
}

void set_thread_count(int threads) {
    threads = std::max(1, threads);
    omp_set_num_threads(threads);
    openblas_set_num_threads(threads);
}

// ---------------------------------------------------------------------------
// Serial reference implementations.

namespace reference {

template <typename Real>
void gemm(bool ta, bool tb, int m, int n, int k, Real alpha, const Real* a, int lda, const Real* b, int ldb,
          Real beta, Real* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            Real acc = 0;
            for (int p = 0; p < k; ++p) {
                const Real av = ta ? a[static_cast<long>(p) * lda + i] : a[static_cast<long>(i) * lda + p];
                const Real bv = tb ? b[static_cast<long>(j) * ldb + p] : b[static_cast<long>(p) * ldb + j];
                acc += av * bv;
            }
            Real& out = c[static_cast<long>(i) * ldc + j];
            out = alpha * acc + (beta == Real(0) ? Real(0) : beta * out);
        }
    }
}

template <typename Real>
void add_bias_rows(Real* y, const Real* bias, int rows, int cols) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) y[static_cast<long>(r) * cols + c] += bias[c];
}

template <typename Real>
void accumulate_column_sums(const Real* x, int rows, int cols, Real* out) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[c] += x[static_cast<long>(r) * cols + c];
}

template <typename Real>
void layer_norm_forward(const Real* x, int rows, int cols, Real eps, Real* y, Real* mean, Real* rstd) {
    for (int r = 0; r < rows; ++r) {
        const Real* xr = x + static_cast<long>(r) * cols;
        Real mu = 0;
        for (int c = 0; c < cols; ++c) mu += xr[c];
        mu /= cols;
        Real var = 0;
        for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= cols;
        mean[r] = mu;
        rstd[r] = Real(1) / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c) y[static_cast<long>(r) * cols + c] = (xr[c] - mu) * rstd[r];
    }
}

template <typename Real>
void layer_norm_backward(const Real* dy, const Real* y, const Real* rstd, int rows, int cols, Real* dx) {
    for (int r = 0; r < rows; ++r) {
        const long o = static_cast<long>(r) * cols;
        Real mean_dy = 0;
        Real mean_dyy = 0;
        for (int c = 0; c < cols; ++c) {
            mean_dy += dy[o + c];
            mean_dyy += dy[o + c] * y[o + c];
        }
        mean_dy /= cols;
        mean_dyy /= cols;
        for (int c = 0; c < cols; ++c) dx[o + c] += rstd[r] * (dy[o + c] - mean_dy - y[o + c] * mean_dyy);
    }
}

template <typename Real>
void modulate_forward(const Real* xn, const Real* shift, const Real* scale, int rows, int cols, Real* y) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const long i = static_cast<long>(r) * cols + c;
            y[i] = xn[i] * (Real(1) + scale[c]) + shift[c];
        }
}

template <typename Real>
void modulate_backward(const Real* dy, const Real* xn, const Real* scale, int rows, int cols, Real* dxn,
                       Real* dshift, Real* dscale) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const long i = static_cast<long>(r) * cols + c;
            dxn[i] = dy[i] * (Real(1) + scale[c]);
            dshift[c] += dy[i];
            dscale[c] += dy[i] * xn[i];
        }
}

template <typename Real>
void softmax_rows(Real* s, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        Real* row = s + static_cast<long>(r) * cols;
        const Real mx = *std::max_element(row, row + cols);
        Real sum = 0;
        for (int c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
        for (int c = 0; c < cols; ++c) row[c] = std::exp(row[c] - mx) / sum;
    }
}

template <typename Real>
void softmax_backward_rows(const Real* p, Real* dp, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const long o = static_cast<long>(r) * cols;
        Real dot = 0;
        for (int c = 0; c < cols; ++c) dot += p[o + c] * dp[o + c];
        for (int c = 0; c < cols; ++c) dp[o + c] = p[o + c] * (dp[o + c] - dot);
    }
}

template <typename Real>
void gelu_forward(const Real* x, Real* y, long n) {
    for (long i = 0; i < n; ++i) y[i] = gelu_value(x[i]);
}

template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, long n) {
    for (long i = 0; i < n; ++i) dx[i] = dy[i] * gelu_derivative(x[i]);
}

template <typename Real>
void silu_forward(const Real* x, Real* y, long n) {
    for (long i = 0; i < n; ++i) y[i] = x[i] / (Real(1) + std::exp(-x[i]));
}

template <typename Real>
void silu_backward(const Real* x, const Real* dy, Real* dx, long n) {
    for (long i = 0; i < n; ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-x[i]));
        dx[i] = dy[i] * s * (Real(1) + x[i] * (Real(1) - s));
    }
}

template <typename Real>
void gated_residual_forward(Real* h, const Real* gate, const Real* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) h[static_cast<long>(r) * cols + c] += gate[c] * y[static_cast<long>(r) * cols + c];
}

template <typename Real>
void gated_residual_backward(const Real* dh, const Real* gate, const Real* y, int rows, int cols, Real* dy,
                             Real* dgate) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const long i = static_cast<long>(r) * cols + c;
            dy[i] = gate[c] * dh[i];
            dgate[c] += dh[i] * y[i];
        }
}

}  // namespace reference

#define VRGBX_INSTANTIATE_KERNELS(NS, Real)                                                                 \
    template void NS::add_bias_rows<Real>(Real*, const Real*, int, int);                                     \
    template void NS::accumulate_column_sums<Real>(const Real*, int, int, Real*);                            \
    template void NS::layer_norm_forward<Real>(const Real*, int, int, Real, Real*, Real*, Real*);            \
    template void NS::layer_norm_backward<Real>(const Real*, const Real*, const Real*, int, int, Real*);     \
    template void NS::modulate_forward<Real>(const Real*, const Real*, const Real*, int, int, Real*);        \
    template void NS::modulate_backward<Real>(const Real*, const Real*, const Real*, int, int, Real*, Real*, \
                                              Real*);                                                        \
    template void NS::softmax_rows<Real>(Real*, int, int);                                                   \
    template void NS::softmax_backward_rows<Real>(const Real*, Real*, int, int);                             \
    template void NS::gelu_forward<Real>(const Real*, Real*, long);                                          \
    template void NS::gelu_backward<Real>(const Real*, const Real*, Real*, long);                            \
    template void NS::silu_forward<Real>(const Real*, Real*, long);                                          \
    template void NS::silu_backward<Real>(const Real*, const Real*, Real*, long);                            \
    template void NS::gated_residual_forward<Real>(Real*, const Real*, const Real*, int, int);               \
    template void NS::gated_residual_backward<Real>(const Real*, const Real*, const Real*, int, int, Real*,  \
                                                    Real*);

namespace parallel_ns = ::vrgbx::kernels;
VRGBX_INSTANTIATE_KERNELS(parallel_ns, float)
VRGBX_INSTANTIATE_KERNELS(parallel_ns, double)
VRGBX_INSTANTIATE_KERNELS(reference, float)
VRGBX_INSTANTIATE_KERNELS(reference, double)
template void reference::gemm<float>(bool, bool, int, int, int, float, const float*, int, const float*, int,
                                     float, float*, int);
template void reference::gemm<double>(bool, bool, int, int, int, double, const double*, int, const double*,
                                      int, double, double*, int);

#undef VRGBX_INSTANTIATE_KERNELS

}  // namespace vrgbx::kernels
