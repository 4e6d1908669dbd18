#include "nanotfm/kernels.hpp"

#include <atomic>

#include "kernels_detail.hpp"
#include "kernels_scalar.hpp"
#include "nanotfm/common.hpp"

namespace nanotfm::kernels {

namespace {

bool cpu_has_avx2() {
#if NANOTFM_HAVE_AVX2_TU
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

std::atomic<Backend>& state() {
    static std::atomic<Backend> b{cpu_has_avx2() ? Backend::avx2 : Backend::scalar};
    return b;
}

}  // namespace

Backend active() { return state().load(std::memory_order_relaxed); }

Backend detect_best() { return cpu_has_avx2() ? Backend::avx2 : Backend::scalar; }

bool supported(Backend b) { return b == Backend::scalar || cpu_has_avx2(); }

void set_backend(Backend b) {
    if (!supported(b))
        throw ConfigError(std::string("kernel backend not supported on this CPU: ") +
                          backend_name(b));
    state().store(b, std::memory_order_relaxed);
}

const char* backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

#if NANOTFM_HAVE_AVX2_TU
#define NANOTFM_DISPATCH(call_scalar, call_avx2) \
    if (active() == Backend::avx2) {             \
        return call_avx2;                        \
    }                                            \
    return call_scalar
#define NANOTFM_DISPATCH_F32ONLY(T, call_scalar, call_avx2)            \
    if constexpr (std::is_same_v<T, float>) {                          \
        if (active() == Backend::avx2) {                               \
            return call_avx2;                                          \
        }                                                              \
    }                                                                  \
    return call_scalar
#else
#define NANOTFM_DISPATCH(call_scalar, call_avx2) return call_scalar
#define NANOTFM_DISPATCH_F32ONLY(T, call_scalar, call_avx2) return call_scalar
#endif

template <class T>
void fill(T* x, T v, std::size_t n) {
    NANOTFM_DISPATCH(scalar::fill(x, v, n), avx2::fill(x, v, n));
}
template <class T>
void add(const T* a, const T* b, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::add(a, b, out, n), avx2::add(a, b, out, n));
}
template <class T>
void sub(const T* a, const T* b, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::sub(a, b, out, n), avx2::sub(a, b, out, n));
}
template <class T>
void mul(const T* a, const T* b, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::mul(a, b, out, n), avx2::mul(a, b, out, n));
}
template <class T>
void div(const T* a, const T* b, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::div(a, b, out, n), avx2::div(a, b, out, n));
}
template <class T>
void scale(T alpha, const T* x, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::scale(alpha, x, out, n), avx2::scale(alpha, x, out, n));
}
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    NANOTFM_DISPATCH(scalar::axpy(alpha, x, y, n), avx2::axpy(alpha, x, y, n));
}
template <class T>
void lerp(const T* a, const T* b, T w, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::lerp(a, b, w, out, n), avx2::lerp(a, b, w, out, n));
}
template <class T>
void clamp(const T* x, T lo, T hi, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::clamp(x, lo, hi, out, n), avx2::clamp(x, lo, hi, out, n));
}
template <class T>
void add_rowvec(const T* x, const T* v, T* out, std::size_t rows, std::size_t cols) {
    NANOTFM_DISPATCH(scalar::add_rowvec(x, v, out, rows, cols),
                     avx2::add_rowvec(x, v, out, rows, cols));
}
template <class T>
void gelu(const T* x, T* out, std::size_t n) {
    NANOTFM_DISPATCH_F32ONLY(T, scalar::gelu(x, out, n), avx2::gelu(x, out, n));
}
template <class T>
void gelu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    NANOTFM_DISPATCH_F32ONLY(T, scalar::gelu_bwd(x, dy, dx, n),
                             avx2::gelu_bwd(x, dy, dx, n));
}
template <class T>
void relu(const T* x, T* out, std::size_t n) {
    NANOTFM_DISPATCH(scalar::relu(x, out, n), avx2::relu(x, out, n));
}
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    NANOTFM_DISPATCH(scalar::relu_bwd(x, dy, dx, n), avx2::relu_bwd(x, dy, dx, n));
}
template <class T>
void softmax_rows(const T* x, T* out, std::size_t rows, std::size_t cols) {
    NANOTFM_DISPATCH_F32ONLY(T, scalar::softmax_rows(x, out, rows, cols),
                             avx2::softmax_rows(x, out, rows, cols));
}
template <class T>
void softmax_rows_bwd(const T* y, const T* dy, T* dx, std::size_t rows,
                      std::size_t cols) {
    NANOTFM_DISPATCH_F32ONLY(T, scalar::softmax_rows_bwd(y, dy, dx, rows, cols),
                             avx2::softmax_rows_bwd(y, dy, dx, rows, cols));
}
template <class T>
void layernorm_rows(const T* x, const T* gain, const T* bias, T eps, T* out, T* mean,
                    T* inv_std, std::size_t rows, std::size_t cols) {
    NANOTFM_DISPATCH_F32ONLY(
        T, scalar::layernorm_rows(x, gain, bias, eps, out, mean, inv_std, rows, cols),
        avx2::layernorm_rows(x, gain, bias, eps, out, mean, inv_std, rows, cols));
}
template <class T>
void layernorm_rows_bwd(const T* x, const T* gain, const T* mean, const T* inv_std,
                        const T* dy, T* dx, T* dgain, T* dbias, std::size_t rows,
                        std::size_t cols) {
    NANOTFM_DISPATCH_F32ONLY(T,
                             scalar::layernorm_rows_bwd(x, gain, mean, inv_std, dy, dx,
                                                        dgain, dbias, rows, cols),
                             avx2::layernorm_rows_bwd(x, gain, mean, inv_std, dy, dx,
                                                      dgain, dbias, rows, cols));
}
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    NANOTFM_DISPATCH(scalar::gemm_nn(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate),
                     avx2::gemm_nn(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate));
}
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    NANOTFM_DISPATCH(scalar::gemm_nt(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate),
                     avx2::gemm_nt(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate));
}
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
             bool accumulate) {
    NANOTFM_DISPATCH(scalar::gemm_tn(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate),
                     avx2::gemm_tn(m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate));
}
template <class T>
T reduce_sum(const T* x, std::size_t n) {
    NANOTFM_DISPATCH(scalar::reduce_sum(x, n), avx2::reduce_sum(x, n));
}
template <class T>
void colsum_acc(const T* x, T* out, std::size_t rows, std::size_t cols) {
    NANOTFM_DISPATCH(scalar::colsum_acc(x, out, rows, cols),
                     avx2::colsum_acc(x, out, rows, cols));
}
template <class T>
void sf_update(T* z, T* v, const T* g, const T* y, std::size_t n, T gamma, T beta2,
               T inv_bias_corr, T eps, T wd) {
    NANOTFM_DISPATCH(scalar::sf_update(z, v, g, y, n, gamma, beta2, inv_bias_corr, eps, wd),
                     avx2::sf_update(z, v, g, y, n, gamma, beta2, inv_bias_corr, eps, wd));
}

#define NANOTFM_INST(T)                                                               \
    template void fill<T>(T*, T, std::size_t);                                        \
    template void add<T>(const T*, const T*, T*, std::size_t);                        \
    template void sub<T>(const T*, const T*, T*, std::size_t);                        \
    template void mul<T>(const T*, const T*, T*, std::size_t);                        \
    template void div<T>(const T*, const T*, T*, std::size_t);                        \
    template void scale<T>(T, const T*, T*, std::size_t);                             \
    template void axpy<T>(T, const T*, T*, std::size_t);                              \
    template void lerp<T>(const T*, const T*, T, T*, std::size_t);                    \
    template void clamp<T>(const T*, T, T, T*, std::size_t);                          \
    template void add_rowvec<T>(const T*, const T*, T*, std::size_t, std::size_t);    \
    template void gelu<T>(const T*, T*, std::size_t);                                 \
    template void gelu_bwd<T>(const T*, const T*, T*, std::size_t);                   \
    template void relu<T>(const T*, T*, std::size_t);                                 \
    template void relu_bwd<T>(const T*, const T*, T*, std::size_t);                   \
    template void softmax_rows<T>(const T*, T*, std::size_t, std::size_t);            \
    template void softmax_rows_bwd<T>(const T*, const T*, T*, std::size_t,            \
                                      std::size_t);                                   \
    template void layernorm_rows<T>(const T*, const T*, const T*, T, T*, T*, T*,      \
                                    std::size_t, std::size_t);                        \
    template void layernorm_rows_bwd<T>(const T*, const T*, const T*, const T*,       \
                                        const T*, T*, T*, T*, std::size_t,            \
                                        std::size_t);                                 \
    template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, T, const T*,      \
                             std::size_t, const T*, std::size_t, T*, std::size_t,     \
                             bool);                                                   \
    template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, T, const T*,      \
                             std::size_t, const T*, std::size_t, T*, std::size_t,     \
                             bool);                                                   \
    template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, T, const T*,      \
                             std::size_t, const T*, std::size_t, T*, std::size_t,     \
                             bool);                                                   \
    template T reduce_sum<T>(const T*, std::size_t);                                  \
    template void colsum_acc<T>(const T*, T*, std::size_t, std::size_t);              \
    template void sf_update<T>(T*, T*, const T*, const T*, std::size_t, T, T, T, T, T);

NANOTFM_INST(float)
NANOTFM_INST(double)
#undef NANOTFM_INST

}  // namespace nanotfm::kernels
