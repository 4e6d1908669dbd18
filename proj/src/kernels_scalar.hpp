#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

// Reference implementations. Every reduction here runs in index order; the
// AVX2 backend is checked against these in the kernel equivalence tests.
// Internal header: only kernels.cpp may include it (it must not be compiled
// in a TU built with wider instruction-set flags).

namespace nanotfm::kernels::scalar {

template <class T>
void fill(T* x, T v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = v;
}

template <class T>
void add(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void sub(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <class T>
void mul(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void div(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] / b[i];
}

template <class T>
void scale(T alpha, const T* x, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void lerp(const T* a, const T* b, T w, T* out, std::size_t n) {
    const T u = T(1) - w;
    for (std::size_t i = 0; i < n; ++i) out[i] = u * a[i] + w * b[i];
}

template <class T>
void clamp(const T* x, T lo, T hi, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, x[i]));
}

template <class T>
void add_rowvec(const T* x, const T* v, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* or_ = out + r * cols;
        for (std::size_t c = 0; c < cols; ++c) or_[c] = xr[c] + v[c];
    }
}

// ---------------------------------------------------------------------------

template <class T>
static inline T gelu_one(T x) {
    const T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T k1 = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
}

template <class T>
void gelu(const T* x, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = gelu_one(x[i]);
}

template <class T>
void gelu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    const T k0 = T(0.7978845608028654);
    const T k1 = T(0.044715);
    for (std::size_t i = 0; i < n; ++i) {
        const T xi = x[i];
        const T t = std::tanh(k0 * (xi + k1 * xi * xi * xi));
        const T sech2 = T(1) - t * t;
        const T d = T(0.5) * (T(1) + t) +
                    T(0.5) * xi * sech2 * k0 * (T(1) + T(3) * k1 * xi * xi);
        dx[i] += dy[i] * d;
    }
}

template <class T>
void relu(const T* x, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
}

// ---------------------------------------------------------------------------

template <class T>
void softmax_rows(const T* x, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* or_ = out + r * cols;
        T m = xr[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            or_[c] = std::exp(xr[c] - m);
            sum += or_[c];
        }
        const T inv = T(1) / sum;
        for (std::size_t c = 0; c < cols; ++c) or_[c] *= inv;
    }
}

template <class T>
void softmax_rows_bwd(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* dyr = dy + r * cols;
        T* dxr = dx + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += dyr[c] * yr[c];
        for (std::size_t c = 0; c < cols; ++c) dxr[c] += (dyr[c] - dot) * yr[c];
    }
}

template <class T>
void layernorm_rows(const T* x, const T* gain, const T* bias, T eps, T* out,
                    T* mean, T* inv_std, std::size_t rows, std::size_t cols) {
    const T invc = T(1) / T(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* or_ = out + r * cols;
        T mu = T(0);
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu *= invc;
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = xr[c] - mu;
            var += d * d;
        }
        var *= invc;
        const T is = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c)
            or_[c] = (xr[c] - mu) * is * gain[c] + bias[c];
    }
}

template <class T>
void layernorm_rows_bwd(const T* x, const T* gain, const T* mean, const T* inv_std,
                        const T* dy, T* dx, T* dgain, T* dbias,
                        std::size_t rows, std::size_t cols) {
    const T invc = T(1) / T(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        const T* dyr = dy + r * cols;
        T* dxr = dx + r * cols;
        const T mu = mean[r];
        const T is = inv_std[r];
        T s1 = T(0), s2 = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            const T xhat = (xr[c] - mu) * is;
            const T g = dyr[c] * gain[c];
            s1 += g;
            s2 += g * xhat;
            dgain[c] += dyr[c] * xhat;
            dbias[c] += dyr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            const T xhat = (xr[c] - mu) * is;
            const T g = dyr[c] * gain[c];
            dxr[c] += is * (g - invc * s1 - xhat * invc * s2);
        }
    }
}

// ---------------------------------------------------------------------------

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* cr = c + i * ldc;
        if (!accumulate)
            for (std::size_t j = 0; j < n; ++j) cr[j] = T(0);
        for (std::size_t p = 0; p < k; ++p) {
            const T av = alpha * a[i * lda + p];
            const T* br = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ar = a + i * lda;
        T* cr = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) {
            const T* br = b + j * ldb;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] = (accumulate ? cr[j] : T(0)) + alpha * acc;
        }
    }
}

template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
        const T* br = b + p * ldb;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = alpha * a[p * lda + i];
            T* cr = c + i * ldc;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <class T>
T reduce_sum(const T* x, std::size_t n) {
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

template <class T>
void colsum_acc(const T* x, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += xr[c];
    }
}

template <class T>
void sf_update(T* z, T* v, const T* g, const T* y, std::size_t n, T gamma, T beta2,
               T inv_bias_corr, T eps, T wd) {
    for (std::size_t i = 0; i < n; ++i) {
        const T gi = g[i];
        v[i] = beta2 * v[i] + (T(1) - beta2) * gi * gi;
        const T denom = std::sqrt(v[i] * inv_bias_corr) + eps;
        z[i] -= gamma * (gi / denom + wd * y[i]);
    }
}

}  // namespace nanotfm::kernels::scalar
