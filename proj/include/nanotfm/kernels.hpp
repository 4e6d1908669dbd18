#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace nanotfm::kernels {

// Scalar reference kernels plus an AVX2 variant selected at runtime. The two
// backends are equivalence-tested against each other; the scalar path is the
// semantic reference. All kernels run reductions in a fixed order, so a given
// backend is bit-reproducible run to run.
enum class Backend { scalar, avx2 };

Backend active();
Backend detect_best();
bool supported(Backend b);
void set_backend(Backend b);  // throws ConfigError if unsupported on this CPU
const char* backend_name(Backend b);

// --- elementwise -----------------------------------------------------------
template <class T> void fill(T* x, T v, std::size_t n);
template <class T> void add(const T* a, const T* b, T* out, std::size_t n);
template <class T> void sub(const T* a, const T* b, T* out, std::size_t n);
template <class T> void mul(const T* a, const T* b, T* out, std::size_t n);
template <class T> void div(const T* a, const T* b, T* out, std::size_t n);
template <class T> void scale(T alpha, const T* x, T* out, std::size_t n);
template <class T> void axpy(T alpha, const T* x, T* y, std::size_t n);  // y += alpha*x
// out = (1-w)*a + w*b
template <class T> void lerp(const T* a, const T* b, T w, T* out, std::size_t n);
template <class T> void clamp(const T* x, T lo, T hi, T* out, std::size_t n);
// out[r, c] = x[r, c] + v[c]
template <class T> void add_rowvec(const T* x, const T* v, T* out,
                                   std::size_t rows, std::size_t cols);

// --- activations -----------------------------------------------------------
// GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
template <class T> void gelu(const T* x, T* out, std::size_t n);
template <class T> void gelu_bwd(const T* x, const T* dy, T* dx, std::size_t n);  // dx +=
template <class T> void relu(const T* x, T* out, std::size_t n);
template <class T> void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n);  // dx +=

// --- row softmax (max-subtracted) -------------------------------------------
template <class T> void softmax_rows(const T* x, T* out, std::size_t rows, std::size_t cols);
// dx += (dy - sum(dy*y)) * y, per row; y is the forward output
template <class T> void softmax_rows_bwd(const T* y, const T* dy, T* dx,
                                         std::size_t rows, std::size_t cols);

// --- row layer norm ----------------------------------------------------------
// out[r,:] = (x[r,:] - mean) * inv_std * gain + bias; saves mean/inv_std per row
template <class T> void layernorm_rows(const T* x, const T* gain, const T* bias, T eps,
                                       T* out, T* mean, T* inv_std,
                                       std::size_t rows, std::size_t cols);
// accumulates dx, dgain, dbias
template <class T> void layernorm_rows_bwd(const T* x, const T* gain, const T* mean,
                                           const T* inv_std, const T* dy,
                                           T* dx, T* dgain, T* dbias,
                                           std::size_t rows, std::size_t cols);

// --- GEMM -------------------------------------------------------------------
// Row-major. accumulate=false overwrites C, true adds into it.
// nn: C = alpha * A[m,k] * B[k,n]
// nt: C = alpha * A[m,k] * B[n,k]^T
// tn: C = alpha * A[k,m]^T * B[k,n]
template <class T> void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T alpha,
                                const T* a, std::size_t lda, const T* b, std::size_t ldb,
                                T* c, std::size_t ldc, bool accumulate);
template <class T> void gemm_nt(std::size_t m, std::size_t n, std::size_t k, T alpha,
                                const T* a, std::size_t lda, const T* b, std::size_t ldb,
                                T* c, std::size_t ldc, bool accumulate);
template <class T> void gemm_tn(std::size_t m, std::size_t n, std::size_t k, T alpha,
                                const T* a, std::size_t lda, const T* b, std::size_t ldb,
                                T* c, std::size_t ldc, bool accumulate);

// --- reductions ---------------------------------------------------------------
template <class T> T reduce_sum(const T* x, std::size_t n);
// out[c] += sum over rows of x[r, c]
template <class T> void colsum_acc(const T* x, T* out, std::size_t rows, std::size_t cols);

// --- optimizer ---------------------------------------------------------------
// v = beta2*v + (1-beta2)*g^2;  z -= gamma * (g / (sqrt(v*inv_bias_corr) + eps) + wd*y)
template <class T> void sf_update(T* z, T* v, const T* g, const T* y, std::size_t n,
                                  T gamma, T beta2, T inv_bias_corr, T eps, T wd);

}  // namespace nanotfm::kernels
