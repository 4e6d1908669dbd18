#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nanotfm/common.hpp"
#include "nanotfm/kernels.hpp"
#include "nanotfm/pool.hpp"
#include "nanotfm/rng.hpp"
#include "nanotfm/threads.hpp"

// Dense tensors with reverse-mode autodiff, rank <= 4, row-major. Tensors are
// immutable once created by an op except for their grad buffers; one backward
// pass owns all grad buffers exclusively. Precision is a template parameter:
// float for training, double for verification.

namespace nanotfm {

// pooled, default-initialized storage (see pool.hpp)
template <class T>
using DataVec = std::vector<T, PoolAlloc<T>>;

template <class T>
using Buffer = std::shared_ptr<DataVec<T>>;

template <class T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // allocated lazily, zero-initialized, same length as data
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::shared_ptr<Node<T>> view_base;  // set for zero-copy reshapes
    std::function<void()> backward_fn;
};

// Thread-local switch: with grads disabled, ops do not record the graph.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    bool prev_;
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s) { return filled(s, T(0)); }

    static Tensor filled(const Shape& s, T v) {
        Tensor t = uninit(s);
        kernels::fill(t.data().data(), v, t.numel());
        return t;
    }

    static Tensor from(const Shape& s, std::vector<T> values) {
        if (static_cast<std::int64_t>(values.size()) != s.numel())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + s.str());
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = s;
        t.n_->data = std::make_shared<DataVec<T>>(values.begin(), values.end());
        return t;
    }

    static Tensor scalar(T v) { return from(Shape{}, {v}); }

    static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0) {
        Tensor t = uninit(s);
        auto d = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i)
            d[i] = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    static Tensor uninit(const Shape& s) {
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = s;
        t.n_->data = std::make_shared<DataVec<T>>(static_cast<std::size_t>(s.numel()));
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return n_->shape.rank; }
    std::int64_t dim(int i) const { return n_->shape[i]; }
    std::int64_t numel() const { return n_->shape.numel(); }

    std::span<T> data() { return {n_->data->data(), n_->data->size()}; }
    std::span<const T> data() const { return {n_->data->data(), n_->data->size()}; }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        n_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return static_cast<bool>(n_->grad); }
    std::span<T> grad() {
        ensure_grad(n_);
        return {n_->grad->data(), n_->grad->size()};
    }
    std::span<const T> grad() const {
        if (!n_->grad) throw NumericError("tensor has no grad buffer");
        return {n_->grad->data(), n_->grad->size()};
    }
    void zero_grad() {
        if (n_->grad) kernels::fill(n_->grad->data(), T(0), n_->grad->size());
    }

    T item() const {
        if (numel() != 1)
            throw ShapeError("item() on non-scalar tensor of shape " + shape().str());
        return (*n_->data)[0];
    }

    // Copy of the values with no graph attached.
    Tensor detached_copy() const {
        Tensor t = uninit(shape());
        std::memcpy(t.data().data(), n_->data->data(), sizeof(T) * numel());
        return t;
    }

    std::shared_ptr<Node<T>>& node() { return n_; }
    const std::shared_ptr<Node<T>>& node() const { return n_; }

    static void ensure_grad(const std::shared_ptr<Node<T>>& n) {
        if (n->grad) return;
        if (n->view_base) {
            ensure_grad(n->view_base);
            n->grad = n->view_base->grad;
            return;
        }
        n->grad = std::make_shared<DataVec<T>>(n->data->size(), T(0));
    }

private:
    std::shared_ptr<Node<T>> n_;
};

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

// ---------------------------------------------------------------------------
// internals
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<std::int64_t, 4> pad_dims(const Shape& s) {
    std::array<std::int64_t, 4> d{1, 1, 1, 1};
    for (int i = 0; i < s.rank; ++i) d[4 - s.rank + i] = s.d[i];
    return d;
}

inline std::array<std::int64_t, 4> row_major_strides(const std::array<std::int64_t, 4>& d) {
    return {d[1] * d[2] * d[3], d[2] * d[3], d[3], 1};
}

// Strides of `s` viewed in the padded broadcast frame of `out` (0 on axes
// where s has extent 1 and out does not).
inline std::array<std::int64_t, 4> bcast_strides(const Shape& s, const Shape& out) {
    const auto sd = pad_dims(s);
    const auto od = pad_dims(out);
    auto st = row_major_strides(sd);
    for (int i = 0; i < 4; ++i)
        if (sd[i] == 1 && od[i] != 1) st[i] = 0;
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const auto ad = pad_dims(a);
    const auto bd = pad_dims(b);
    Shape out;
    out.rank = std::max(a.rank, b.rank);
    std::array<std::int64_t, 4> od{1, 1, 1, 1};
    for (int i = 0; i < 4; ++i) {
        if (ad[i] == bd[i]) od[i] = ad[i];
        else if (ad[i] == 1) od[i] = bd[i];
        else if (bd[i] == 1) od[i] = ad[i];
        else
            throw ShapeError("shapes not broadcastable: " + a.str() + " vs " + b.str());
    }
    for (int i = 0; i < out.rank; ++i) out.d[i] = od[4 - out.rank + i];
    return out;
}

// flat out index -> strided index of a broadcast operand
inline std::int64_t strided_index(std::int64_t flat, const Shape& out,
                                  const std::array<std::int64_t, 4>& st) {
    const auto od = pad_dims(out);
    std::int64_t idx = 0;
    for (int ax = 3; ax >= 0; --ax) {
        idx += (flat % od[ax]) * st[ax];
        flat /= od[ax];
    }
    return idx;
}

// dst[bcast index] += f(flat out index), iterated in row-major out order.
template <class T, class F>
void bcast_accumulate(const Shape& out, T* dst, const Shape& dshape, F&& f) {
    const auto od = pad_dims(out);
    const auto ds = bcast_strides(dshape, out);
    std::int64_t flat = 0;
    for (std::int64_t i0 = 0; i0 < od[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < od[1]; ++i1)
            for (std::int64_t i2 = 0; i2 < od[2]; ++i2) {
                T* row = dst + i0 * ds[0] + i1 * ds[1] + i2 * ds[2];
                for (std::int64_t i3 = 0; i3 < od[3]; ++i3)
                    row[i3 * ds[3]] += f(flat++);
            }
}

template <class T, class F>
void bcast_apply(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, F&& f) {
    const auto od = pad_dims(out.shape());
    const auto as = bcast_strides(a.shape(), out.shape());
    const auto bs = bcast_strides(b.shape(), out.shape());
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    std::int64_t flat = 0;
    for (std::int64_t i0 = 0; i0 < od[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < od[1]; ++i1)
            for (std::int64_t i2 = 0; i2 < od[2]; ++i2) {
                const T* ar = ap + i0 * as[0] + i1 * as[1] + i2 * as[2];
                const T* br = bp + i0 * bs[0] + i1 * bs[1] + i2 * bs[2];
                for (std::int64_t i3 = 0; i3 < od[3]; ++i3)
                    op[flat++] = f(ar[i3 * as[3]], br[i3 * bs[3]]);
            }
}

inline constexpr std::int64_t kParGrain = 4096;

template <class T>
void flat_binary_parallel(const T* a, const T* b, T* out, std::int64_t n,
                          void (*k)(const T*, const T*, T*, std::size_t)) {
    parallel_for(n, kParGrain, [&](std::int64_t b0, std::int64_t b1) {
        k(a + b0, b + b0, out + b0, static_cast<std::size_t>(b1 - b0));
    });
}

template <class T>
bool wants_grad(const Tensor<T>& t) {
    return GradMode::enabled() && t.requires_grad();
}

template <class T>
void attach(Tensor<T>& out, std::vector<std::shared_ptr<Node<T>>> parents,
            std::function<void()> fn) {
    auto& n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::uninit(os);
    if (a.shape() == os && b.shape() == os)
        detail::flat_binary_parallel(a.data().data(), b.data().data(), out.data().data(),
                                     out.numel(), &kernels::add<T>);
    else
        detail::bcast_apply(a, b, out, [](T x, T y) { return x + y; });

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node(), on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on] {
            const T* g = on->grad->data();
            for (auto& pn : {an, bn}) {
                if (!pn->requires_grad) continue;
                Tensor<T>::ensure_grad(pn);
                if (pn->shape == on->shape)
                    detail::flat_binary_parallel<T>(
                        pn->grad->data(), g, pn->grad->data(), pn->shape.numel(),
                        [](const T* x, const T* y, T* o, std::size_t n) {
                            // o == x here; accumulate y
                            kernels::add(x, y, o, n);
                        });
                else
                    detail::bcast_accumulate(on->shape, pn->grad->data(), pn->shape,
                                             [g](std::int64_t i) { return g[i]; });
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::uninit(os);
    if (a.shape() == os && b.shape() == os)
        detail::flat_binary_parallel(a.data().data(), b.data().data(), out.data().data(),
                                     out.numel(), &kernels::sub<T>);
    else
        detail::bcast_apply(a, b, out, [](T x, T y) { return x - y; });

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node(), on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on] {
            const T* g = on->grad->data();
            if (an->requires_grad) {
                Tensor<T>::ensure_grad(an);
                detail::bcast_accumulate(on->shape, an->grad->data(), an->shape,
                                         [g](std::int64_t i) { return g[i]; });
            }
            if (bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                detail::bcast_accumulate(on->shape, bn->grad->data(), bn->shape,
                                         [g](std::int64_t i) { return -g[i]; });
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::uninit(os);
    if (a.shape() == os && b.shape() == os)
        detail::flat_binary_parallel(a.data().data(), b.data().data(), out.data().data(),
                                     out.numel(), &kernels::mul<T>);
    else
        detail::bcast_apply(a, b, out, [](T x, T y) { return x * y; });

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node(), on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on] {
            const T* g = on->grad->data();
            if (an->requires_grad) {
                Tensor<T>::ensure_grad(an);
                const T* bd = bn->data->data();
                const auto bs = detail::bcast_strides(bn->shape, on->shape);
                detail::bcast_accumulate(
                    on->shape, an->grad->data(), an->shape, [&](std::int64_t i) {
                        return g[i] * bd[detail::strided_index(i, on->shape, bs)];
                    });
            }
            if (bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                const T* ad = an->data->data();
                const auto as = detail::bcast_strides(an->shape, on->shape);
                detail::bcast_accumulate(
                    on->shape, bn->grad->data(), bn->shape, [&](std::int64_t i) {
                        return g[i] * ad[detail::strided_index(i, on->shape, as)];
                    });
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::uninit(os);
    if (a.shape() == os && b.shape() == os)
        detail::flat_binary_parallel(a.data().data(), b.data().data(), out.data().data(),
                                     out.numel(), &kernels::div<T>);
    else
        detail::bcast_apply(a, b, out, [](T x, T y) { return x / y; });

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node(), on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on] {
            const T* g = on->grad->data();
            const T* ad = an->data->data();
            const T* bd = bn->data->data();
            const auto as = detail::bcast_strides(an->shape, on->shape);
            const auto bs = detail::bcast_strides(bn->shape, on->shape);
            if (an->requires_grad) {
                Tensor<T>::ensure_grad(an);
                detail::bcast_accumulate(
                    on->shape, an->grad->data(), an->shape, [&](std::int64_t i) {
                        return g[i] / bd[detail::strided_index(i, on->shape, bs)];
                    });
            }
            if (bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                detail::bcast_accumulate(
                    on->shape, bn->grad->data(), bn->shape, [&](std::int64_t i) {
                        const T bv = bd[detail::strided_index(i, on->shape, bs)];
                        const T av = ad[detail::strided_index(i, on->shape, as)];
                        return -g[i] * av / (bv * bv);
                    });
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double alpha) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::scale(static_cast<T>(alpha), a.data().data(), out.data().data(), a.numel());
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, alpha] {
            Tensor<T>::ensure_grad(an);
            kernels::axpy(static_cast<T>(alpha), on->grad->data(), an->grad->data(),
                          an->grad->size());
        });
    }
    return out;
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::clamp(a.data().data(), static_cast<T>(lo), static_cast<T>(hi),
                   out.data().data(), a.numel());
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, lo, hi] {
            Tensor<T>::ensure_grad(an);
            const T* x = an->data->data();
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            const T l = static_cast<T>(lo), h = static_cast<T>(hi);
            for (std::size_t i = 0; i < an->data->size(); ++i)
                if (x[i] >= l && x[i] <= h) dx[i] += g[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, double lo) {
    return clamp(a, lo, std::numeric_limits<double>::infinity());
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* x = a.data().data();
    T* o = out.data().data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = std::sqrt(x[i]);
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on] {
            Tensor<T>::ensure_grad(an);
            const T* y = on->data->data();
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            for (std::size_t i = 0; i < an->data->size(); ++i)
                dx[i] += g[i] * T(0.5) / y[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    parallel_for(a.numel(), detail::kParGrain, [&](std::int64_t b0, std::int64_t b1) {
        kernels::gelu(a.data().data() + b0, out.data().data() + b0,
                      static_cast<std::size_t>(b1 - b0));
    });
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on] {
            Tensor<T>::ensure_grad(an);
            const T* x = an->data->data();
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            parallel_for(static_cast<std::int64_t>(an->data->size()), detail::kParGrain,
                         [&](std::int64_t b0, std::int64_t b1) {
                             kernels::gelu_bwd(x + b0, g + b0, dx + b0,
                                               static_cast<std::size_t>(b1 - b0));
                         });
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::relu(a.data().data(), out.data().data(), a.numel());
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on] {
            Tensor<T>::ensure_grad(an);
            kernels::relu_bwd(an->data->data(), on->grad->data(), an->grad->data(),
                              an->data->size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

// Zero-copy: shares the data (and, once allocated, the grad) of its base.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
    if (s.numel() != a.numel())
        throw ShapeError("reshape " + a.shape().str() + " -> " + s.str() +
                         ": element count differs");
    Tensor<T> out;
    out.node() = std::make_shared<Node<T>>();
    auto& n = out.node();
    n->shape = s;
    n->data = a.node()->data;
    n->view_base = a.node()->view_base ? a.node()->view_base : a.node();
    if (a.node()->grad) n->grad = a.node()->grad;
    if (detail::wants_grad(a)) {
        n->requires_grad = true;
        n->is_leaf = false;
        n->parents = {a.node()};
        // grads flow through the shared buffer; nothing to do here
        n->backward_fn = nullptr;
    }
    return out;
}

template <class T>
void detail_transpose_copy(const T* src, T* dst, const Shape& in_shape, int a0, int a1,
                           bool accumulate) {
    // dst shape = in_shape with a0/a1 swapped; iterate dst row-major
    const int pad = 4 - in_shape.rank;
    Shape os = in_shape;
    std::swap(os.d[a0], os.d[a1]);
    const auto od = detail::pad_dims(os);
    auto ist = detail::row_major_strides(detail::pad_dims(in_shape));
    std::swap(ist[pad + a0], ist[pad + a1]);  // now: stride of input per dst axis
    std::int64_t flat = 0;
    for (std::int64_t i0 = 0; i0 < od[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < od[1]; ++i1)
            for (std::int64_t i2 = 0; i2 < od[2]; ++i2) {
                const T* s = src + i0 * ist[0] + i1 * ist[1] + i2 * ist[2];
                if (ist[3] == 1 && !accumulate) {
                    std::memcpy(dst + flat, s, sizeof(T) * od[3]);
                    flat += od[3];
                } else if (ist[3] == 1) {
                    kernels::add(dst + flat, s, dst + flat, od[3]);
                    flat += od[3];
                } else {
                    for (std::int64_t i3 = 0; i3 < od[3]; ++i3, ++flat) {
                        if (accumulate) dst[flat] += s[i3 * ist[3]];
                        else dst[flat] = s[i3 * ist[3]];
                    }
                }
            }
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a, int a0, int a1) {
    const int r = a.rank();
    if (a0 < 0) a0 += r;
    if (a1 < 0) a1 += r;
    if (a0 < 0 || a0 >= r || a1 < 0 || a1 >= r)
        throw ShapeError("transpose axes out of range for " + a.shape().str());
    Shape os = a.shape();
    std::swap(os.d[a0], os.d[a1]);
    Tensor<T> out = Tensor<T>::uninit(os);
    detail_transpose_copy(a.data().data(), out.data().data(), a.shape(), a0, a1, false);
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, a0, a1] {
            Tensor<T>::ensure_grad(an);
            // transposing the transposed grad restores the original layout
            detail_transpose_copy(on->grad->data(), an->grad->data(), on->shape, a0, a1,
                                  true);
        });
    }
    return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::int64_t start, std::int64_t len) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("slice axis out of range");
    if (start < 0 || len < 0 || start + len > a.dim(axis))
        throw ShapeError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for axis extent " +
                         std::to_string(a.dim(axis)));
    Shape os = a.shape();
    os.d[axis] = len;
    Tensor<T> out = Tensor<T>::uninit(os);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    const std::int64_t in_block = a.dim(axis) * inner, out_block = len * inner;
    const T* src = a.data().data();
    T* dst = out.data().data();
    if (out_block > 0)
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(dst + o * out_block, src + o * in_block + start * inner,
                        sizeof(T) * out_block);

    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, outer, inner, in_block, out_block, start] {
            if (out_block == 0) return;
            Tensor<T>::ensure_grad(an);
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            for (std::int64_t o = 0; o < outer; ++o)
                kernels::add(dx + o * in_block + start * inner, g + o * out_block,
                             dx + o * in_block + start * inner, out_block);
        });
    }
    return out;
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (b.rank() != r || axis < 0 || axis >= r)
        throw ShapeError("concat rank/axis mismatch: " + a.shape().str() + " vs " +
                         b.shape().str());
    for (int i = 0; i < r; ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat shapes differ off-axis: " + a.shape().str() + " vs " +
                             b.shape().str());
    Shape os = a.shape();
    os.d[axis] = a.dim(axis) + b.dim(axis);
    Tensor<T> out = Tensor<T>::uninit(os);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    const std::int64_t ablk = a.dim(axis) * inner, bblk = b.dim(axis) * inner;
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        if (ablk) std::memcpy(op + o * (ablk + bblk), ap + o * ablk, sizeof(T) * ablk);
        if (bblk)
            std::memcpy(op + o * (ablk + bblk) + ablk, bp + o * bblk, sizeof(T) * bblk);
    }

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node();
        auto on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on, outer, ablk, bblk] {
            const T* g = on->grad->data();
            if (an->requires_grad) {
                Tensor<T>::ensure_grad(an);
                T* da = an->grad->data();
                for (std::int64_t o = 0; o < outer; ++o)
                    kernels::add(da + o * ablk, g + o * (ablk + bblk), da + o * ablk, ablk);
            }
            if (bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                T* db = bn->grad->data();
                for (std::int64_t o = 0; o < outer; ++o)
                    kernels::add(db + o * bblk, g + o * (ablk + bblk) + ablk, db + o * bblk,
                                 bblk);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = true) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("sum axis out of range");
    Shape os = a.shape();
    os.d[axis] = 1;
    if (!keepdim) {
        Shape sq;
        sq.rank = r - 1;
        int j = 0;
        for (int i = 0; i < r; ++i)
            if (i != axis) sq.d[j++] = os.d[i];
        os = sq;
    }

    std::int64_t outer = 1, inner = 1;
    const std::int64_t ext = a.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);

    Tensor<T> out = Tensor<T>::zeros(os);
    const T* ap = a.data().data();
    T* op = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t e = 0; e < ext; ++e)
            kernels::add(op + o * inner, ap + (o * ext + e) * inner, op + o * inner, inner);

    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, outer, inner, ext] {
            Tensor<T>::ensure_grad(an);
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t e = 0; e < ext; ++e)
                    kernels::add(dx + (o * ext + e) * inner, g + o * inner,
                                 dx + (o * ext + e) * inner, inner);
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = true) {
    const int r = a.rank();
    const int ax = axis < 0 ? axis + r : axis;
    const std::int64_t ext = a.dim(ax);
    if (ext == 0) throw ShapeError("mean over empty axis");
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(ext));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(kernels::reduce_sum(a.data().data(), a.numel()));
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on] {
            Tensor<T>::ensure_grad(an);
            const T g = (*on->grad)[0];
            T* dx = an->grad->data();
            for (std::size_t i = 0; i < an->data->size(); ++i) dx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulDims {
    std::int64_t m, n, k;
    std::int64_t nb;                         // batch count
    std::array<std::int64_t, 2> ob;          // out batch dims (padded)
    std::array<std::int64_t, 2> astep, bstep;  // per batch axis, in matrix blocks
};

}  // namespace detail

// C = alpha * A . op(B), batched over up to two leading dims (broadcastable).
// op(B) = B^T over the trailing two dims when trans_b.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false,
                 double alpha = 1.0) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul needs rank >= 2: " + a.shape().str() + " and " +
                         b.shape().str());
    const std::int64_t m = a.dim(a.rank() - 2);
    const std::int64_t k = a.dim(a.rank() - 1);
    const std::int64_t kb = trans_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
    const std::int64_t n = trans_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
    if (k != kb)
        throw ShapeError("matmul: inner extents differ: " + a.shape().str() +
                         (trans_b ? " x T(" : " x (") + b.shape().str() + ")");

    std::array<std::int64_t, 2> abd{1, 1}, bbd{1, 1}, ob{1, 1};
    for (int i = 0; i < a.rank() - 2; ++i) abd[2 - (a.rank() - 2) + i] = a.dim(i);
    for (int i = 0; i < b.rank() - 2; ++i) bbd[2 - (b.rank() - 2) + i] = b.dim(i);
    for (int i = 0; i < 2; ++i) {
        if (abd[i] == bbd[i]) ob[i] = abd[i];
        else if (abd[i] == 1) ob[i] = bbd[i];
        else if (bbd[i] == 1) ob[i] = abd[i];
        else
            throw ShapeError("matmul: leading dims not broadcastable: " + a.shape().str() +
                             " vs " + b.shape().str());
    }

    const int orank = std::max(a.rank(), b.rank());
    Shape os;
    os.rank = orank;
    for (int i = 0; i < orank - 2; ++i) os.d[i] = ob[2 - (orank - 2) + i];
    os.d[orank - 2] = m;
    os.d[orank - 1] = n;

    detail::MatmulDims dm;
    dm.m = m;
    dm.n = n;
    dm.k = k;
    dm.nb = ob[0] * ob[1];
    dm.ob = ob;
    dm.astep = {abd[0] == 1 ? 0 : abd[1], abd[1] == 1 ? 0 : 1};
    dm.bstep = {bbd[0] == 1 ? 0 : bbd[1], bbd[1] == 1 ? 0 : 1};

    auto a_off = [dm](std::int64_t bi) {
        return (dm.astep[0] * (bi / dm.ob[1]) + dm.astep[1] * (bi % dm.ob[1])) * dm.m * dm.k;
    };
    auto b_off = [dm](std::int64_t bi) {
        return (dm.bstep[0] * (bi / dm.ob[1]) + dm.bstep[1] * (bi % dm.ob[1])) * dm.k * dm.n;
    };

    Tensor<T> out = Tensor<T>::uninit(os);
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    const T al = static_cast<T>(alpha);

    auto fwd_one = [&](std::int64_t bi, std::int64_t r0, std::int64_t r1) {
        const T* A = ap + a_off(bi) + r0 * k;
        const T* B = bp + b_off(bi);
        T* C = op + bi * m * n + r0 * n;
        if (trans_b) kernels::gemm_nt(r1 - r0, n, k, al, A, k, B, k, C, n, false);
        else kernels::gemm_nn(r1 - r0, n, k, al, A, k, B, n, C, n, false);
    };
    if (dm.nb == 1) {
        parallel_for(m, 16, [&](std::int64_t r0, std::int64_t r1) { fwd_one(0, r0, r1); });
    } else {
        parallel_for(dm.nb, 1, [&](std::int64_t b0, std::int64_t b1) {
            for (std::int64_t bi = b0; bi < b1; ++bi) fwd_one(bi, 0, m);
        });
    }

    if (detail::wants_grad(a) || detail::wants_grad(b)) {
        auto an = a.node(), bn = b.node();
        auto on = out.node().get();
        detail::attach(out, {a.node(), b.node()}, [an, bn, on, dm, trans_b, al, a_off,
                                                   b_off] {
            const T* g = on->grad->data();
            const T* A = an->data->data();
            const T* B = bn->data->data();
            const auto [m, n, k, nb, ob, astep, bstep] = dm;
            if (an->requires_grad) {
                Tensor<T>::ensure_grad(an);
                T* dA = an->grad->data();
                const bool a_shared = (astep[0] == 0 && ob[0] > 1) ||
                                      (astep[1] == 0 && ob[1] > 1);
                auto one = [&](std::int64_t bi) {
                    const T* G = g + bi * m * n;
                    const T* Bm = B + b_off(bi);
                    T* D = dA + a_off(bi);
                    if (trans_b) kernels::gemm_nn(m, k, n, al, G, n, Bm, k, D, k, true);
                    else kernels::gemm_nt(m, k, n, al, G, n, Bm, n, D, k, true);
                };
                if (a_shared || nb == 1) {
                    for (std::int64_t bi = 0; bi < nb; ++bi) one(bi);
                } else {
                    parallel_for(nb, 1, [&](std::int64_t b0, std::int64_t b1) {
                        for (std::int64_t bi = b0; bi < b1; ++bi) one(bi);
                    });
                }
            }
            if (bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                T* dB = bn->grad->data();
                const bool b_shared = (bstep[0] == 0 && ob[0] > 1) ||
                                      (bstep[1] == 0 && ob[1] > 1);
                auto one = [&](std::int64_t bi) {
                    const T* G = g + bi * m * n;
                    const T* Am = A + a_off(bi);
                    T* D = dB + b_off(bi);
                    if (trans_b) kernels::gemm_tn(n, k, m, al, G, n, Am, k, D, k, true);
                    else kernels::gemm_tn(k, n, m, al, Am, k, G, n, D, n, true);
                };
                if (b_shared || nb == 1) {
                    for (std::int64_t bi = 0; bi < nb; ++bi) one(bi);
                } else {
                    parallel_for(nb, 1, [&](std::int64_t b0, std::int64_t b1) {
                        for (std::int64_t bi = b0; bi < b1; ++bi) one(bi);
                    });
                }
            }
        });
    }
    return out;
}

// out = x . w + bias over the last axis of x; w is (k, n), bias is (n) or
// undefined. The default parameterization of every linear map in the model.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + w.shape().str());
    const std::int64_t k = w.dim(0), n = w.dim(1);
    if (x.dim(x.rank() - 1) != k)
        throw ShapeError("linear: input " + x.shape().str() + " does not match weight " +
                         w.shape().str());
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != n))
        throw ShapeError("linear: bias shape " + bias.shape().str() + " expected " +
                         std::to_string(n));
    const std::int64_t rows = x.numel() / std::max<std::int64_t>(k, 1);
    Shape os = x.shape();
    os.d[os.rank - 1] = n;

    Tensor<T> out = Tensor<T>::uninit(os);
    const T* xp = x.data().data();
    const T* wp = w.data().data();
    T* op = out.data().data();
    parallel_for(rows, 16, [&](std::int64_t r0, std::int64_t r1) {
        if (has_bias) {
            const T* bp = bias.data().data();
            for (std::int64_t r = r0; r < r1; ++r)
                std::memcpy(op + r * n, bp, sizeof(T) * n);
            kernels::gemm_nn(r1 - r0, n, k, T(1), xp + r0 * k, k, wp, n, op + r0 * n, n,
                             true);
        } else {
            kernels::gemm_nn(r1 - r0, n, k, T(1), xp + r0 * k, k, wp, n, op + r0 * n, n,
                             false);
        }
    });

    const bool need = detail::wants_grad(x) || detail::wants_grad(w) ||
                      (has_bias && detail::wants_grad(bias));
    if (need) {
        auto xn = x.node(), wn = w.node();
        auto bn = has_bias ? bias.node() : nullptr;
        auto on = out.node().get();
        std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
        if (has_bias) parents.push_back(bias.node());
        detail::attach(out, std::move(parents), [xn, wn, bn, on, rows, k, n] {
            const T* g = on->grad->data();
            if (xn->requires_grad) {
                Tensor<T>::ensure_grad(xn);
                T* dx = xn->grad->data();
                const T* wp2 = wn->data->data();
                parallel_for(rows, 16, [&](std::int64_t r0, std::int64_t r1) {
                    kernels::gemm_nt(r1 - r0, k, n, T(1), g + r0 * n, n, wp2, n,
                                     dx + r0 * k, k, true);
                });
            }
            if (wn->requires_grad) {
                Tensor<T>::ensure_grad(wn);
                T* dw = wn->grad->data();
                const T* xp2 = xn->data->data();
                parallel_for(k, 8, [&](std::int64_t k0, std::int64_t k1) {
                    // dW rows [k0, k1): strided columns of x
                    kernels::gemm_tn(k1 - k0, n, rows, T(1), xp2 + k0, k, g, n,
                                     dw + k0 * n, n, true);
                });
            }
            if (bn && bn->requires_grad) {
                Tensor<T>::ensure_grad(bn);
                kernels::colsum_acc(g, bn->grad->data(), rows, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm / cross entropy
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("softmax axis out of range");
    if (axis != r - 1) {
        // move the axis last, apply, move back; autodiff composes
        Tensor<T> t = transpose(a, axis, r - 1);
        return transpose(softmax(t, r - 1), axis, r - 1);
    }
    const std::int64_t cols = a.dim(r - 1);
    const std::int64_t rows = cols ? a.numel() / cols : 0;
    if (cols == 0) return Tensor<T>::uninit(a.shape());
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* xp = a.data().data();
    T* op = out.data().data();
    parallel_for(rows, 32, [&](std::int64_t r0, std::int64_t r1) {
        kernels::softmax_rows(xp + r0 * cols, op + r0 * cols, r1 - r0, cols);
    });
    if (detail::wants_grad(a)) {
        auto an = a.node();
        auto on = out.node().get();
        detail::attach(out, {a.node()}, [an, on, rows, cols] {
            Tensor<T>::ensure_grad(an);
            const T* y = on->data->data();
            const T* g = on->grad->data();
            T* dx = an->grad->data();
            parallel_for(rows, 32, [&](std::int64_t r0, std::int64_t r1) {
                kernels::softmax_rows_bwd(y + r0 * cols, g + r0 * cols, dx + r0 * cols,
                                          r1 - r0, cols);
            });
        });
    }
    return out;
}

// Normalizes over the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
    const int r = x.rank();
    const std::int64_t cols = x.dim(r - 1);
    if (gain.numel() != cols || bias.numel() != cols)
        throw ShapeError("layer_norm: gain/bias must match last axis extent " +
                         std::to_string(cols));
    const std::int64_t rows = cols ? x.numel() / cols : 0;
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    auto mean = std::make_shared<std::vector<T>>(rows);
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const T* xp = x.data().data();
    T* op = out.data().data();
    parallel_for(rows, 32, [&](std::int64_t r0, std::int64_t r1) {
        kernels::layernorm_rows(xp + r0 * cols, gain.data().data(), bias.data().data(),
                                static_cast<T>(eps), op + r0 * cols, mean->data() + r0,
                                inv_std->data() + r0, r1 - r0, cols);
    });
    if (detail::wants_grad(x) || detail::wants_grad(gain) || detail::wants_grad(bias)) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        auto on = out.node().get();
        detail::attach(out, {x.node(), gain.node(), bias.node()},
                       [xn, gn, bn, on, mean, inv_std, rows, cols] {
                           // dgain/dbias accumulate across rows: sequential call
                           Tensor<T>::ensure_grad(xn);
                           Tensor<T>::ensure_grad(gn);
                           Tensor<T>::ensure_grad(bn);
                           kernels::layernorm_rows_bwd(
                               xn->data->data(), gn->data->data(), mean->data(),
                               inv_std->data(), on->grad->data(), xn->grad->data(),
                               gn->grad->data(), bn->grad->data(), rows, cols);
                       });
    }
    return out;
}

// Mean over rows of -log softmax(logits)[label]; logits (N, K). Numerically
// stable via log-sum-exp with max subtraction.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy: logits must be rank 2, got " +
                         logits.shape().str());
    const std::int64_t n = logits.dim(0), kk = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
    for (std::int64_t i = 0; i < n; ++i)
        if (labels[i] < 0 || labels[i] >= kk)
            throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                             " out of range [0, " + std::to_string(kk) + ") at row " +
                             std::to_string(i));
    if (n == 0) throw ShapeError("cross_entropy: empty batch");

    auto probs = std::make_shared<std::vector<T>>(n * kk);
    const T* lp = logits.data().data();
    double loss = 0.0;  // fixed-order accumulation
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = lp + i * kk;
        T m = row[0];
        for (std::int64_t j = 1; j < kk; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < kk; ++j) {
            const T e = std::exp(row[j] - m);
            (*probs)[i * kk + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < kk; ++j) (*probs)[i * kk + j] *= inv;
        loss += static_cast<double>(m) + std::log(static_cast<double>(sum)) -
                static_cast<double>(row[labels[i]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(n)));

    if (detail::wants_grad(logits)) {
        auto ln = logits.node();
        auto on = out.node().get();
        detail::attach(out, {logits.node()}, [ln, on, probs, labels, n, kk] {
            Tensor<T>::ensure_grad(ln);
            const T g = (*on->grad)[0] / static_cast<T>(n);
            T* dx = ln->grad->data();
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < kk; ++j)
                    dx[i * kk + j] += g * (*probs)[i * kk + j];
                dx[i * kk + labels[i]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Seeds the root gradient with one,
// then propagates in reverse topological order. Leaf gradients accumulate
// across repeated calls until explicitly zeroed. With release_graph (the
// default), non-leaf activations and closures are freed as the sweep passes
// them, so a released graph cannot be walked twice.
template <class T>
void backward(Tensor<T>& root, bool release_graph = true) {
    if (root.numel() != 1)
        throw ShapeError("backward: root must be scalar, got shape " + root.shape().str());
    if (!root.requires_grad()) return;

    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto p = node->parents[next++];
            if (p->requires_grad && seen.insert(p.get()).second)
                stack.emplace_back(std::move(p), 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Tensor<T>::ensure_grad(root.node());
    kernels::fill(root.node()->grad->data(), T(1), 1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = it->get();
        if (node->backward_fn) node->backward_fn();
        if (node->is_leaf || node->view_base) continue;
        if (release_graph) {
            if (node != root.node().get()) node->data.reset();
            node->grad.reset();
            node->backward_fn = nullptr;
            node->parents.clear();
        } else if (node->grad) {
            // only leaf gradients persist across sweeps
            kernels::fill(node->grad->data(), T(0), node->grad->size());
        }
    }
}

}  // namespace nanotfm
