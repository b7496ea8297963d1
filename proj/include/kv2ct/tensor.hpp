// tensor.hpp - small dense row-major kernels used by the network.
//
// Conventions: matrices are contiguous row-major. Linear layers store weights
// as [out, in] and compute y = x*W^T + b. All kernels are templated so the
// same code paths run in float (training) and double (gradient checking).
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kv2ct/common.hpp"

namespace kv2ct {

// C[m,n] = A[m,k] * B[k,n]; accumulates into C when add=true.
template <typename T>
void gemm_nn(int m, int n, int k, const T* A, const T* B, T* C, bool add) {
    for (int i = 0; i < m; ++i) {
        T* c = C + std::size_t(i) * n;
        if (!add)
            for (int j = 0; j < n; ++j) c[j] = T(0);
        const T* a = A + std::size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = a[p];
            const T* b = B + std::size_t(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] = A[m,k] * B[n,k]^T (row-dot-row).
template <typename T>
void gemm_nt(int m, int n, int k, const T* A, const T* B, T* C, bool add) {
    for (int i = 0; i < m; ++i) {
        const T* a = A + std::size_t(i) * k;
        T* c = C + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* b = B + std::size_t(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] = add ? c[j] + acc : acc;
        }
    }
}

// C[k,n] = A[m,k]^T * B[m,n] (outer-product accumulation).
template <typename T>
void gemm_tn(int m, int n, int k, const T* A, const T* B, T* C, bool add) {
    if (!add)
        for (std::size_t i = 0; i < std::size_t(k) * n; ++i) C[i] = T(0);
    for (int i = 0; i < m; ++i) {
        const T* a = A + std::size_t(i) * k;
        const T* b = B + std::size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = a[p];
            T* c = C + std::size_t(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// y[rows,out] = x[rows,in] * W[out,in]^T + b. W is transposed into scratch
// once so the inner loop is a stride-1 row update (vectorizes without
// reassociating the per-element sum over `in`).
template <typename T>
void linear_forward(int rows, int in, int out, const T* x, const T* w, const T* b, T* y) {
    static thread_local std::vector<T> wt;
    wt.resize(std::size_t(in) * out);
    for (int o = 0; o < out; ++o)
        for (int p = 0; p < in; ++p) wt[std::size_t(p) * out + o] = w[std::size_t(o) * in + p];
    for (int i = 0; i < rows; ++i) {
        const T* xi = x + std::size_t(i) * in;
        T* yi = y + std::size_t(i) * out;
        if (b)
            for (int j = 0; j < out; ++j) yi[j] = b[j];
        else
            for (int j = 0; j < out; ++j) yi[j] = T(0);
        for (int p = 0; p < in; ++p) {
            const T xv = xi[p];
            const T* wrow = wt.data() + std::size_t(p) * out;
            for (int j = 0; j < out; ++j) yi[j] += xv * wrow[j];
        }
    }
}

// Accumulates dW += dy^T x, db += colsum(dy), and writes/accumulates dx = dy W.
template <typename T>
void linear_backward(int rows, int in, int out, const T* x, const T* w, const T* dy, T* dw,
                     T* db, T* dx, bool add_dx) {
    gemm_tn(rows, in, out, dy, x, dw, true);
    if (db)
        for (int i = 0; i < rows; ++i) {
            const T* d = dy + std::size_t(i) * out;
            for (int j = 0; j < out; ++j) db[j] += d[j];
        }
    if (dx) gemm_nn(rows, in, out, dy, w, dx, add_dx);
}

// Per-row layer normalization over the last dimension with affine (g, b).
// Caches the normalized activations and inverse std for the backward pass.
template <typename T>
void layernorm_forward(int rows, int d, const T* x, const T* g, const T* b, T* y, T* xhat,
                       T* invstd, T eps = T(1e-5)) {
    for (int i = 0; i < rows; ++i) {
        const T* xi = x + std::size_t(i) * d;
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = xi[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        invstd[i] = is;
        T* yi = y + std::size_t(i) * d;
        T* xh = xhat + std::size_t(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * is;
            yi[j] = xh[j] * g[j] + b[j];
        }
    }
}

// dx (+)= LN backward; accumulates dg, db.
template <typename T>
void layernorm_backward(int rows, int d, const T* xhat, const T* invstd, const T* g,
                        const T* dy, T* dg, T* db, T* dx, bool add_dx) {
    for (int i = 0; i < rows; ++i) {
        const T* xh = xhat + std::size_t(i) * d;
        const T* dyi = dy + std::size_t(i) * d;
        T sum_gdy = T(0), sum_gdy_xh = T(0);
        for (int j = 0; j < d; ++j) {
            const T gd = g[j] * dyi[j];
            sum_gdy += gd;
            sum_gdy_xh += gd * xh[j];
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
        }
        const T m1 = sum_gdy / T(d), m2 = sum_gdy_xh / T(d);
        T* dxi = dx + std::size_t(i) * d;
        for (int j = 0; j < d; ++j) {
            const T v = (g[j] * dyi[j] - m1 - xh[j] * m2) * invstd[i];
            dxi[j] = add_dx ? dxi[j] + v : v;
        }
    }
}

// Row-wise softmax with max subtraction, in place allowed (y may alias x).
template <typename T>
void softmax_rows(int rows, int n, const T* x, T* y) {
    for (int i = 0; i < rows; ++i) {
        const T* xi = x + std::size_t(i) * n;
        T* yi = y + std::size_t(i) * n;
        T mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < n; ++j) yi[j] *= inv;
    }
}

// dx = (dy - sum(dy*y)) * y per row; dx may alias dy.
template <typename T>
void softmax_backward_rows(int rows, int n, const T* y, const T* dy, T* dx) {
    for (int i = 0; i < rows; ++i) {
        const T* yi = y + std::size_t(i) * n;
        const T* dyi = dy + std::size_t(i) * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += dyi[j] * yi[j];
        T* dxi = dx + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) dxi[j] = (dyi[j] - dot) * yi[j];
    }
}

// Exact (erf-based) GELU and its derivative.
template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
    const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
}

}  // namespace kv2ct
