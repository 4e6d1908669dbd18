#pragma once

#include <cstddef>
#include <new>
#include <utility>

namespace nanotfm {

namespace detail {
// Size-bucketed free list for tensor buffers. Training reuses the same
// handful of shapes every step; recycling blocks avoids both the zero-fill
// of fresh vectors and the page-fault churn of large mmap'd allocations.
void* pool_acquire(std::size_t bytes);
void pool_release(void* p, std::size_t bytes) noexcept;
}  // namespace detail

// Allocator for tensor storage: pooled blocks, and plain default
// initialization so trivially-constructible elements are left uninitialized.
template <class T>
struct PoolAlloc {
    using value_type = T;

    PoolAlloc() = default;
    template <class U>
    PoolAlloc(const PoolAlloc<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(detail::pool_acquire(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        detail::pool_release(p, n * sizeof(T));
    }

    template <class U>
    void construct(U* p) noexcept(noexcept(::new(static_cast<void*>(p)) U)) {
        ::new (static_cast<void*>(p)) U;  // default-init, not value-init
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }

    bool operator==(const PoolAlloc&) const { return true; }
    bool operator!=(const PoolAlloc&) const { return false; }
};

}  // namespace nanotfm
