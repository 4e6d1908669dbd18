#pragma once

#include <cstddef>

// Internal: AVX2 backend entry points (compiled in a TU with -mavx2 -mfma and
// gated at runtime by cpuid). f64 softmax/layernorm/gelu have no AVX2 variant;
// the dispatcher falls back to the scalar reference for those.

#if defined(__x86_64__) || defined(_M_X64)
#define NANOTFM_HAVE_AVX2_TU 1
#else
#define NANOTFM_HAVE_AVX2_TU 0
#endif

#if NANOTFM_HAVE_AVX2_TU

namespace nanotfm::kernels::avx2 {

#define NANOTFM_AVX2_COMMON_DECLS(T)                                                  \
    void fill(T*, T, std::size_t);                                                    \
    void add(const T*, const T*, T*, std::size_t);                                    \
    void sub(const T*, const T*, T*, std::size_t);                                    \
    void mul(const T*, const T*, T*, std::size_t);                                    \
    void div(const T*, const T*, T*, std::size_t);                                    \
    void scale(T, const T*, T*, std::size_t);                                         \
    void axpy(T, const T*, T*, std::size_t);                                          \
    void lerp(const T*, const T*, T, T*, std::size_t);                                \
    void clamp(const T*, T, T, T*, std::size_t);                                      \
    void add_rowvec(const T*, const T*, T*, std::size_t, std::size_t);                \
    void relu(const T*, T*, std::size_t);                                             \
    void relu_bwd(const T*, const T*, T*, std::size_t);                               \
    void gemm_nn(std::size_t, std::size_t, std::size_t, T, const T*, std::size_t,     \
                 const T*, std::size_t, T*, std::size_t, bool);                        \
    void gemm_nt(std::size_t, std::size_t, std::size_t, T, const T*, std::size_t,     \
                 const T*, std::size_t, T*, std::size_t, bool);                        \
    void gemm_tn(std::size_t, std::size_t, std::size_t, T, const T*, std::size_t,     \
                 const T*, std::size_t, T*, std::size_t, bool);                        \
    T reduce_sum(const T*, std::size_t);                                              \
    void colsum_acc(const T*, T*, std::size_t, std::size_t);                          \
    void sf_update(T*, T*, const T*, const T*, std::size_t, T, T, T, T, T);

NANOTFM_AVX2_COMMON_DECLS(float)
NANOTFM_AVX2_COMMON_DECLS(double)
#undef NANOTFM_AVX2_COMMON_DECLS

// float-only transcendental kernels
void gelu(const float*, float*, std::size_t);
void gelu_bwd(const float*, const float*, float*, std::size_t);
void softmax_rows(const float*, float*, std::size_t, std::size_t);
void softmax_rows_bwd(const float*, const float*, float*, std::size_t, std::size_t);
void layernorm_rows(const float*, const float*, const float*, float, float*, float*,
                    float*, std::size_t, std::size_t);
void layernorm_rows_bwd(const float*, const float*, const float*, const float*,
                        const float*, float*, float*, float*, std::size_t, std::size_t);

}  // namespace nanotfm::kernels::avx2

#endif  // NANOTFM_HAVE_AVX2_TU
