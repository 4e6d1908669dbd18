#include "kernels_detail.hpp"

#if NANOTFM_HAVE_AVX2_TU

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>

// AVX2 + FMA kernel variants. This TU is compiled with -mavx2 -mfma; nothing
// here may run unless cpuid reported both (see kernels.cpp).

namespace nanotfm::kernels::avx2 {

namespace {

// Thin wrappers so the GEMM/elementwise bodies are written once for f32/f64.
struct V8f {
    using scalar_t = float;
    static constexpr std::size_t W = 8;
    __m256 v;
    static V8f load(const float* p) { return {_mm256_loadu_ps(p)}; }
    static V8f set1(float x) { return {_mm256_set1_ps(x)}; }
    static V8f zero() { return {_mm256_setzero_ps()}; }
    void store(float* p) const { _mm256_storeu_ps(p, v); }
    friend V8f operator+(V8f a, V8f b) { return {_mm256_add_ps(a.v, b.v)}; }
    friend V8f operator-(V8f a, V8f b) { return {_mm256_sub_ps(a.v, b.v)}; }
    friend V8f operator*(V8f a, V8f b) { return {_mm256_mul_ps(a.v, b.v)}; }
    friend V8f operator/(V8f a, V8f b) { return {_mm256_div_ps(a.v, b.v)}; }
    friend V8f fmadd(V8f a, V8f b, V8f c) { return {_mm256_fmadd_ps(a.v, b.v, c.v)}; }
    friend V8f vmin(V8f a, V8f b) { return {_mm256_min_ps(a.v, b.v)}; }
    friend V8f vmax(V8f a, V8f b) { return {_mm256_max_ps(a.v, b.v)}; }
    friend V8f vsqrt(V8f a) { return {_mm256_sqrt_ps(a.v)}; }
    float hsum() const {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
        lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
        return _mm_cvtss_f32(lo);
    }
};

struct V4d {
    using scalar_t = double;
    static constexpr std::size_t W = 4;
    __m256d v;
    static V4d load(const double* p) { return {_mm256_loadu_pd(p)}; }
    static V4d set1(double x) { return {_mm256_set1_pd(x)}; }
    static V4d zero() { return {_mm256_setzero_pd()}; }
    void store(double* p) const { _mm256_storeu_pd(p, v); }
    friend V4d operator+(V4d a, V4d b) { return {_mm256_add_pd(a.v, b.v)}; }
    friend V4d operator-(V4d a, V4d b) { return {_mm256_sub_pd(a.v, b.v)}; }
    friend V4d operator*(V4d a, V4d b) { return {_mm256_mul_pd(a.v, b.v)}; }
    friend V4d operator/(V4d a, V4d b) { return {_mm256_div_pd(a.v, b.v)}; }
    friend V4d fmadd(V4d a, V4d b, V4d c) { return {_mm256_fmadd_pd(a.v, b.v, c.v)}; }
    friend V4d vmin(V4d a, V4d b) { return {_mm256_min_pd(a.v, b.v)}; }
    friend V4d vmax(V4d a, V4d b) { return {_mm256_max_pd(a.v, b.v)}; }
    friend V4d vsqrt(V4d a) { return {_mm256_sqrt_pd(a.v)}; }
    double hsum() const {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
        return _mm_cvtsd_f64(lo);
    }
};

template <class T> struct vec_for;
template <> struct vec_for<float> { using type = V8f; };
template <> struct vec_for<double> { using type = V4d; };

// exp for 8 floats, Cephes-style polynomial; |rel err| < 3 ulp on [-87, 88].
inline __m256 exp256(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    const __m256 c1 = _mm256_set1_ps(0.693359375f);
    const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
    const __m256 one = _mm256_set1_ps(1.0f);

    x = _mm256_min_ps(hi, _mm256_max_ps(lo, x));
    __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
    fx = _mm256_floor_ps(fx);
    x = _mm256_fnmadd_ps(fx, c1, x);
    x = _mm256_fnmadd_ps(fx, c2, x);

    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, one));

    __m256i n = _mm256_cvttps_epi32(fx);
    n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
    n = _mm256_slli_epi32(n, 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

// tanh(x) = 1 - 2/(exp(2x) + 1); saturates outside [-9, 9].
inline __m256 tanh256(__m256 x) {
    const __m256 cap = _mm256_set1_ps(9.0f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 two = _mm256_set1_ps(2.0f);
    x = _mm256_min_ps(cap, _mm256_max_ps(_mm256_set1_ps(-9.0f), x));
    __m256 e = exp256(_mm256_mul_ps(two, x));
    return _mm256_sub_ps(one, _mm256_div_ps(two, _mm256_add_ps(e, one)));
}

template <class T, class Fn, class FnScalar>
inline void map1(const T* x, T* out, std::size_t n, Fn f, FnScalar fs) {
    using V = typename vec_for<T>::type;
    std::size_t i = 0;
    for (; i + V::W <= n; i += V::W) f(V::load(x + i)).store(out + i);
    for (; i < n; ++i) out[i] = fs(x[i]);
}

template <class T, class Fn, class FnScalar>
inline void map2(const T* a, const T* b, T* out, std::size_t n, Fn f, FnScalar fs) {
    using V = typename vec_for<T>::type;
    std::size_t i = 0;
    for (; i + V::W <= n; i += V::W) f(V::load(a + i), V::load(b + i)).store(out + i);
    for (; i < n; ++i) out[i] = fs(a[i], b[i]);
}

// ---------------------------------------------------------------------------
// GEMM bodies (4 x 2W register tile)
// ---------------------------------------------------------------------------

template <class V, class T = typename V::scalar_t>
void gemm_nn_body(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
                  std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                  bool acc) {
    constexpr std::size_t W = V::W;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 2 * W <= n; j += 2 * W) {
            V r[4][2];
            for (int q = 0; q < 4; ++q) {
                r[q][0] = acc ? V::load(c + (i + q) * ldc + j) : V::zero();
                r[q][1] = acc ? V::load(c + (i + q) * ldc + j + W) : V::zero();
            }
            for (std::size_t p = 0; p < k; ++p) {
                const V b0 = V::load(b + p * ldb + j);
                const V b1 = V::load(b + p * ldb + j + W);
                for (int q = 0; q < 4; ++q) {
                    const V av = V::set1(alpha * a[(i + q) * lda + p]);
                    r[q][0] = fmadd(av, b0, r[q][0]);
                    r[q][1] = fmadd(av, b1, r[q][1]);
                }
            }
            for (int q = 0; q < 4; ++q) {
                r[q][0].store(c + (i + q) * ldc + j);
                r[q][1].store(c + (i + q) * ldc + j + W);
            }
        }
        for (; j + W <= n; j += W) {
            V r[4];
            for (int q = 0; q < 4; ++q)
                r[q] = acc ? V::load(c + (i + q) * ldc + j) : V::zero();
            for (std::size_t p = 0; p < k; ++p) {
                const V b0 = V::load(b + p * ldb + j);
                for (int q = 0; q < 4; ++q)
                    r[q] = fmadd(V::set1(alpha * a[(i + q) * lda + p]), b0, r[q]);
            }
            for (int q = 0; q < 4; ++q) r[q].store(c + (i + q) * ldc + j);
        }
        for (; j < n; ++j) {
            for (int q = 0; q < 4; ++q) {
                T s = acc ? c[(i + q) * ldc + j] : T(0);
                for (std::size_t p = 0; p < k; ++p)
                    s += alpha * a[(i + q) * lda + p] * b[p * ldb + j];
                c[(i + q) * ldc + j] = s;
            }
        }
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + W <= n; j += W) {
            V r = acc ? V::load(c + i * ldc + j) : V::zero();
            for (std::size_t p = 0; p < k; ++p)
                r = fmadd(V::set1(alpha * a[i * lda + p]), V::load(b + p * ldb + j), r);
            r.store(c + i * ldc + j);
        }
        for (; j < n; ++j) {
            T s = acc ? c[i * ldc + j] : T(0);
            for (std::size_t p = 0; p < k; ++p)
                s += alpha * a[i * lda + p] * b[p * ldb + j];
            c[i * ldc + j] = s;
        }
    }
}

template <class V, class T = typename V::scalar_t>
void gemm_nt_body(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
                  std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                  bool acc) {
    constexpr std::size_t W = V::W;
    for (std::size_t i = 0; i < m; ++i) {
        const T* ar = a + i * lda;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            V s0 = V::zero(), s1 = V::zero(), s2 = V::zero(), s3 = V::zero();
            std::size_t p = 0;
            for (; p + W <= k; p += W) {
                const V av = V::load(ar + p);
                s0 = fmadd(av, V::load(b + (j + 0) * ldb + p), s0);
                s1 = fmadd(av, V::load(b + (j + 1) * ldb + p), s1);
                s2 = fmadd(av, V::load(b + (j + 2) * ldb + p), s2);
                s3 = fmadd(av, V::load(b + (j + 3) * ldb + p), s3);
            }
            T t0 = s0.hsum(), t1 = s1.hsum(), t2 = s2.hsum(), t3 = s3.hsum();
            for (; p < k; ++p) {
                t0 += ar[p] * b[(j + 0) * ldb + p];
                t1 += ar[p] * b[(j + 1) * ldb + p];
                t2 += ar[p] * b[(j + 2) * ldb + p];
                t3 += ar[p] * b[(j + 3) * ldb + p];
            }
            T* cr = c + i * ldc + j;
            cr[0] = (acc ? cr[0] : T(0)) + alpha * t0;
            cr[1] = (acc ? cr[1] : T(0)) + alpha * t1;
            cr[2] = (acc ? cr[2] : T(0)) + alpha * t2;
            cr[3] = (acc ? cr[3] : T(0)) + alpha * t3;
        }
        for (; j < n; ++j) {
            V s = V::zero();
            std::size_t p = 0;
            for (; p + W <= k; p += W)
                s = fmadd(V::load(ar + p), V::load(b + j * ldb + p), s);
            T t = s.hsum();
            for (; p < k; ++p) t += ar[p] * b[j * ldb + p];
            c[i * ldc + j] = (acc ? c[i * ldc + j] : T(0)) + alpha * t;
        }
    }
}

template <class V, class T = typename V::scalar_t>
void gemm_tn_body(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
                  std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                  bool acc) {
    constexpr std::size_t W = V::W;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 2 * W <= n; j += 2 * W) {
            V r[4][2];
            for (int q = 0; q < 4; ++q) {
                r[q][0] = acc ? V::load(c + (i + q) * ldc + j) : V::zero();
                r[q][1] = acc ? V::load(c + (i + q) * ldc + j + W) : V::zero();
            }
            for (std::size_t p = 0; p < k; ++p) {
                const V b0 = V::load(b + p * ldb + j);
                const V b1 = V::load(b + p * ldb + j + W);
                for (int q = 0; q < 4; ++q) {
                    const V av = V::set1(alpha * a[p * lda + i + q]);
                    r[q][0] = fmadd(av, b0, r[q][0]);
                    r[q][1] = fmadd(av, b1, r[q][1]);
                }
            }
            for (int q = 0; q < 4; ++q) {
                r[q][0].store(c + (i + q) * ldc + j);
                r[q][1].store(c + (i + q) * ldc + j + W);
            }
        }
        for (; j + W <= n; j += W) {
            V r[4];
            for (int q = 0; q < 4; ++q)
                r[q] = acc ? V::load(c + (i + q) * ldc + j) : V::zero();
            for (std::size_t p = 0; p < k; ++p) {
                const V b0 = V::load(b + p * ldb + j);
                for (int q = 0; q < 4; ++q)
                    r[q] = fmadd(V::set1(alpha * a[p * lda + i + q]), b0, r[q]);
            }
            for (int q = 0; q < 4; ++q) r[q].store(c + (i + q) * ldc + j);
        }
        for (; j < n; ++j) {
            for (int q = 0; q < 4; ++q) {
                T s = acc ? c[(i + q) * ldc + j] : T(0);
                for (std::size_t p = 0; p < k; ++p)
                    s += alpha * a[p * lda + i + q] * b[p * ldb + j];
                c[(i + q) * ldc + j] = s;
            }
        }
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + W <= n; j += W) {
            V r = acc ? V::load(c + i * ldc + j) : V::zero();
            for (std::size_t p = 0; p < k; ++p)
                r = fmadd(V::set1(alpha * a[p * lda + i]), V::load(b + p * ldb + j), r);
            r.store(c + i * ldc + j);
        }
        for (; j < n; ++j) {
            T s = acc ? c[i * ldc + j] : T(0);
            for (std::size_t p = 0; p < k; ++p)
                s += alpha * a[p * lda + i] * b[p * ldb + j];
            c[i * ldc + j] = s;
        }
    }
}

template <class T>
void sf_update_body(T* z, T* v, const T* g, const T* y, std::size_t n, T gamma,
                    T beta2, T inv_bias_corr, T eps, T wd) {
    using V = typename vec_for<T>::type;
    const V vb2 = V::set1(beta2), vomb2 = V::set1(T(1) - beta2);
    const V vibc = V::set1(inv_bias_corr), veps = V::set1(eps);
    const V vg = V::set1(gamma), vwd = V::set1(wd);
    std::size_t i = 0;
    for (; i + V::W <= n; i += V::W) {
        const V gi = V::load(g + i);
        V vi = fmadd(vomb2, gi * gi, vb2 * V::load(v + i));
        vi.store(v + i);
        const V denom = vsqrt(vi * vibc) + veps;
        V step = gi / denom;
        step = fmadd(vwd, V::load(y + i), step);
        (V::load(z + i) - vg * step).store(z + i);
    }
    for (; i < n; ++i) {
        const T gi = g[i];
        v[i] = beta2 * v[i] + (T(1) - beta2) * gi * gi;
        z[i] -= gamma * (gi / (std::sqrt(v[i] * inv_bias_corr) + eps) + wd * y[i]);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Concrete overloads, f32 and f64
// ---------------------------------------------------------------------------

#define NANOTFM_AVX2_COMMON_DEFS(T, V)                                               \
    void fill(T* x, T val, std::size_t n) {                                          \
        std::size_t i = 0;                                                           \
        const V vv = V::set1(val);                                                   \
        for (; i + V::W <= n; i += V::W) vv.store(x + i);                            \
        for (; i < n; ++i) x[i] = val;                                               \
    }                                                                                \
    void add(const T* a, const T* b, T* o, std::size_t n) {                          \
        map2(a, b, o, n, [](V x, V y) { return x + y; },                             \
             [](T x, T y) { return x + y; });                                        \
    }                                                                                \
    void sub(const T* a, const T* b, T* o, std::size_t n) {                          \
        map2(a, b, o, n, [](V x, V y) { return x - y; },                             \
             [](T x, T y) { return x - y; });                                        \
    }                                                                                \
    void mul(const T* a, const T* b, T* o, std::size_t n) {                          \
        map2(a, b, o, n, [](V x, V y) { return x * y; },                             \
             [](T x, T y) { return x * y; });                                        \
    }                                                                                \
    void div(const T* a, const T* b, T* o, std::size_t n) {                          \
        map2(a, b, o, n, [](V x, V y) { return x / y; },                             \
             [](T x, T y) { return x / y; });                                        \
    }                                                                                \
    void scale(T alpha, const T* x, T* o, std::size_t n) {                           \
        const V va = V::set1(alpha);                                                 \
        map1(x, o, n, [va](V v) { return va * v; }, [alpha](T v) { return alpha * v; }); \
    }                                                                                \
    void axpy(T alpha, const T* x, T* y, std::size_t n) {                            \
        const V va = V::set1(alpha);                                                 \
        std::size_t i = 0;                                                           \
        for (; i + V::W <= n; i += V::W)                                             \
            fmadd(va, V::load(x + i), V::load(y + i)).store(y + i);                  \
        for (; i < n; ++i) y[i] += alpha * x[i];                                     \
    }                                                                                \
    void lerp(const T* a, const T* b, T w, T* o, std::size_t n) {                    \
        const V vu = V::set1(T(1) - w), vw = V::set1(w);                             \
        map2(a, b, o, n,                                                             \
             [vu, vw](V x, V y) { return fmadd(vw, y, vu * x); },                    \
             [w](T x, T y) { return (T(1) - w) * x + w * y; });                      \
    }                                                                                \
    void clamp(const T* x, T lo, T hi, T* o, std::size_t n) {                        \
        const V vl = V::set1(lo), vh = V::set1(hi);                                  \
        map1(x, o, n, [vl, vh](V v) { return vmin(vh, vmax(vl, v)); },               \
             [lo, hi](T v) { return std::min(hi, std::max(lo, v)); });               \
    }                                                                                \
    void add_rowvec(const T* x, const T* v, T* o, std::size_t rows, std::size_t cols) { \
        for (std::size_t r = 0; r < rows; ++r)                                       \
            add(x + r * cols, v, o + r * cols, cols);                                \
    }                                                                                \
    void relu(const T* x, T* o, std::size_t n) {                                     \
        const V z = V::zero();                                                       \
        map1(x, o, n, [z](V v) { return vmax(z, v); },                               \
             [](T v) { return v > T(0) ? v : T(0); });                               \
    }                                                                                \
    void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {                   \
        for (std::size_t i = 0; i < n; ++i)                                          \
            if (x[i] > T(0)) dx[i] += dy[i];                                         \
    }                                                                                \
    void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,   \
                 std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, \
                 bool acc) {                                                         \
        gemm_nn_body<V>(m, n, k, alpha, a, lda, b, ldb, c, ldc, acc);                \
    }                                                                                \
    void gemm_nt(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,   \
                 std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, \
                 bool acc) {                                                         \
        gemm_nt_body<V>(m, n, k, alpha, a, lda, b, ldb, c, ldc, acc);                \
    }                                                                                \
    void gemm_tn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,   \
                 std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, \
                 bool acc) {                                                         \
        gemm_tn_body<V>(m, n, k, alpha, a, lda, b, ldb, c, ldc, acc);                \
    }                                                                                \
    T reduce_sum(const T* x, std::size_t n) {                                        \
        V s = V::zero();                                                             \
        std::size_t i = 0;                                                           \
        for (; i + V::W <= n; i += V::W) s = s + V::load(x + i);                     \
        T t = s.hsum();                                                              \
        for (; i < n; ++i) t += x[i];                                                \
        return t;                                                                    \
    }                                                                                \
    void colsum_acc(const T* x, T* out, std::size_t rows, std::size_t cols) {        \
        for (std::size_t r = 0; r < rows; ++r) add(x + r * cols, out, out, cols);    \
    }                                                                                \
    void sf_update(T* z, T* v, const T* g, const T* y, std::size_t n, T gamma,       \
                   T beta2, T ibc, T eps, T wd) {                                    \
        sf_update_body(z, v, g, y, n, gamma, beta2, ibc, eps, wd);                   \
    }

NANOTFM_AVX2_COMMON_DEFS(float, V8f)
NANOTFM_AVX2_COMMON_DEFS(double, V4d)
#undef NANOTFM_AVX2_COMMON_DEFS

// ---------------------------------------------------------------------------
// f32 transcendentals
// ---------------------------------------------------------------------------

namespace {
constexpr float kGeluK0 = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluK1 = 0.044715f;
}  // namespace

void gelu(const float* x, float* out, std::size_t n) {
    const __m256 k0 = _mm256_set1_ps(kGeluK0);
    const __m256 k1 = _mm256_set1_ps(kGeluK1);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        const __m256 x2 = _mm256_mul_ps(xv, xv);
        const __m256 inner = _mm256_mul_ps(k0, _mm256_fmadd_ps(_mm256_mul_ps(k1, x2), xv, xv));
        const __m256 t = tanh256(inner);
        _mm256_storeu_ps(out + i,
                         _mm256_mul_ps(_mm256_mul_ps(half, xv), _mm256_add_ps(one, t)));
    }
    for (; i < n; ++i) {
        const float xi = x[i];
        out[i] = 0.5f * xi * (1.0f + std::tanh(kGeluK0 * (xi + kGeluK1 * xi * xi * xi)));
    }
}

void gelu_bwd(const float* x, const float* dy, float* dx, std::size_t n) {
    const __m256 k0 = _mm256_set1_ps(kGeluK0);
    const __m256 k1 = _mm256_set1_ps(kGeluK1);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 three = _mm256_set1_ps(3.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        const __m256 x2 = _mm256_mul_ps(xv, xv);
        const __m256 inner = _mm256_mul_ps(k0, _mm256_fmadd_ps(_mm256_mul_ps(k1, x2), xv, xv));
        const __m256 t = tanh256(inner);
        const __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
        const __m256 di = _mm256_mul_ps(k0, _mm256_fmadd_ps(_mm256_mul_ps(three, k1), x2, one));
        __m256 d = _mm256_mul_ps(half, _mm256_add_ps(one, t));
        d = _mm256_fmadd_ps(_mm256_mul_ps(_mm256_mul_ps(half, xv), sech2), di, d);
        const __m256 acc = _mm256_fmadd_ps(_mm256_loadu_ps(dy + i), d, _mm256_loadu_ps(dx + i));
        _mm256_storeu_ps(dx + i, acc);
    }
    for (; i < n; ++i) {
        const float xi = x[i];
        const float t = std::tanh(kGeluK0 * (xi + kGeluK1 * xi * xi * xi));
        const float d = 0.5f * (1.0f + t) +
                        0.5f * xi * (1.0f - t * t) * kGeluK0 * (1.0f + 3.0f * kGeluK1 * xi * xi);
        dx[i] += dy[i] * d;
    }
}

void softmax_rows(const float* x, float* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* or_ = out + r * cols;
        float m = xr[0];
        std::size_t c = 0;
        if (cols >= 8) {
            __m256 vm = _mm256_loadu_ps(xr);
            for (c = 8; c + 8 <= cols; c += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(xr + c));
            alignas(32) float tmp[8];
            _mm256_store_ps(tmp, vm);
            for (int q = 0; q < 8; ++q) m = std::max(m, tmp[q]);
        }
        for (; c < cols; ++c) m = std::max(m, xr[c]);

        const __m256 vmax = _mm256_set1_ps(m);
        __m256 vsum = _mm256_setzero_ps();
        c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 e = exp256(_mm256_sub_ps(_mm256_loadu_ps(xr + c), vmax));
            _mm256_storeu_ps(or_ + c, e);
            vsum = _mm256_add_ps(vsum, e);
        }
        float sum = V8f{vsum}.hsum();
        for (; c < cols; ++c) {
            or_[c] = std::exp(xr[c] - m);
            sum += or_[c];
        }
        const float inv = 1.0f / sum;
        const __m256 vinv = _mm256_set1_ps(inv);
        c = 0;
        for (; c + 8 <= cols; c += 8)
            _mm256_storeu_ps(or_ + c, _mm256_mul_ps(_mm256_loadu_ps(or_ + c), vinv));
        for (; c < cols; ++c) or_[c] *= inv;
    }
}

void softmax_rows_bwd(const float* y, const float* dy, float* dx, std::size_t rows,
                      std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const float* yr = y + r * cols;
        const float* dyr = dy + r * cols;
        float* dxr = dx + r * cols;
        __m256 vdot = _mm256_setzero_ps();
        std::size_t c = 0;
        for (; c + 8 <= cols; c += 8)
            vdot = _mm256_fmadd_ps(_mm256_loadu_ps(dyr + c), _mm256_loadu_ps(yr + c), vdot);
        float dot = V8f{vdot}.hsum();
        for (; c < cols; ++c) dot += dyr[c] * yr[c];
        const __m256 vd = _mm256_set1_ps(dot);
        c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 t = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(dyr + c), vd),
                                           _mm256_loadu_ps(yr + c));
            _mm256_storeu_ps(dxr + c, _mm256_add_ps(_mm256_loadu_ps(dxr + c), t));
        }
        for (; c < cols; ++c) dxr[c] += (dyr[c] - dot) * yr[c];
    }
}

void layernorm_rows(const float* x, const float* gain, const float* bias, float eps,
                    float* out, float* mean, float* inv_std, std::size_t rows,
                    std::size_t cols) {
    const float invc = 1.0f / static_cast<float>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* or_ = out + r * cols;
        __m256 vs = _mm256_setzero_ps();
        std::size_t c = 0;
        for (; c + 8 <= cols; c += 8) vs = _mm256_add_ps(vs, _mm256_loadu_ps(xr + c));
        float mu = V8f{vs}.hsum();
        for (; c < cols; ++c) mu += xr[c];
        mu *= invc;

        const __m256 vmu = _mm256_set1_ps(mu);
        __m256 vv = _mm256_setzero_ps();
        c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(xr + c), vmu);
            vv = _mm256_fmadd_ps(d, d, vv);
        }
        float var = V8f{vv}.hsum();
        for (; c < cols; ++c) {
            const float d = xr[c] - mu;
            var += d * d;
        }
        var *= invc;
        const float is = 1.0f / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;

        const __m256 vis = _mm256_set1_ps(is);
        c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 xh = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), vmu), vis);
            _mm256_storeu_ps(or_ + c, _mm256_fmadd_ps(xh, _mm256_loadu_ps(gain + c),
                                                      _mm256_loadu_ps(bias + c)));
        }
        for (; c < cols; ++c) or_[c] = (xr[c] - mu) * is * gain[c] + bias[c];
    }
}

void layernorm_rows_bwd(const float* x, const float* gain, const float* mean,
                        const float* inv_std, const float* dy, float* dx, float* dgain,
                        float* dbias, std::size_t rows, std::size_t cols) {
    const float invc = 1.0f / static_cast<float>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        const float* dyr = dy + r * cols;
        float* dxr = dx + r * cols;
        const float mu = mean[r];
        const float is = inv_std[r];
        const __m256 vmu = _mm256_set1_ps(mu), vis = _mm256_set1_ps(is);
        __m256 vs1 = _mm256_setzero_ps(), vs2 = _mm256_setzero_ps();
        std::size_t c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 xh = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), vmu), vis);
            const __m256 dyv = _mm256_loadu_ps(dyr + c);
            const __m256 g = _mm256_mul_ps(dyv, _mm256_loadu_ps(gain + c));
            vs1 = _mm256_add_ps(vs1, g);
            vs2 = _mm256_fmadd_ps(g, xh, vs2);
            _mm256_storeu_ps(dgain + c,
                             _mm256_fmadd_ps(dyv, xh, _mm256_loadu_ps(dgain + c)));
            _mm256_storeu_ps(dbias + c, _mm256_add_ps(dyv, _mm256_loadu_ps(dbias + c)));
        }
        float s1 = V8f{vs1}.hsum(), s2 = V8f{vs2}.hsum();
        for (; c < cols; ++c) {
            const float xh = (xr[c] - mu) * is;
            const float g = dyr[c] * gain[c];
            s1 += g;
            s2 += g * xh;
            dgain[c] += dyr[c] * xh;
            dbias[c] += dyr[c];
        }
        const __m256 vt1 = _mm256_set1_ps(s1 * invc), vt2 = _mm256_set1_ps(s2 * invc);
        c = 0;
        for (; c + 8 <= cols; c += 8) {
            const __m256 xh = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + c), vmu), vis);
            const __m256 g = _mm256_mul_ps(_mm256_loadu_ps(dyr + c), _mm256_loadu_ps(gain + c));
            const __m256 t = _mm256_fnmadd_ps(xh, vt2, _mm256_sub_ps(g, vt1));
            _mm256_storeu_ps(dxr + c,
                             _mm256_fmadd_ps(vis, t, _mm256_loadu_ps(dxr + c)));
        }
        for (; c < cols; ++c) {
            const float xh = (xr[c] - mu) * is;
            const float g = dyr[c] * gain[c];
            dxr[c] += is * (g - s1 * invc - xh * s2 * invc);
        }
    }
}

}  // namespace nanotfm::kernels::avx2

#endif  // NANOTFM_HAVE_AVX2_TU
