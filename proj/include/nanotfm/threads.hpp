#pragma once

#include <cstdint>
#include <functional>

namespace nanotfm {

// Fixed-size worker pool for data-parallel loops over disjoint output ranges.
// Work is handed out in contiguous chunks; because every chunk writes its own
// region and no kernel reduces across chunks, results do not depend on the
// schedule or the thread count. NANOTFM_THREADS caps the pool size.
class ThreadPool {
public:
    static ThreadPool& instance();

    int threads() const;

    // Runs fn(begin, end) over a partition of [0, n). Executes inline when the
    // pool has one thread, n is small, or we are already inside a worker.
    void parallel_for(std::int64_t n, std::int64_t grain,
                      const std::function<void(std::int64_t, std::int64_t)>& fn);

private:
    ThreadPool();
    ~ThreadPool();
    ThreadPool(const ThreadPool&) = delete;

    struct Impl;
    Impl* impl_;
};

inline void parallel_for(std::int64_t n, std::int64_t grain,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
    ThreadPool::instance().parallel_for(n, grain, fn);
}

}  // namespace nanotfm
