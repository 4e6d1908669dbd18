#include "nanotfm/threads.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "nanotfm/common.hpp"

namespace nanotfm {

namespace {
thread_local bool g_inside_worker = false;
}

struct ThreadPool::Impl {
    int nthreads;
    std::vector<std::thread> workers;

    std::mutex m;
    std::condition_variable cv_work;
    std::condition_variable cv_done;
    bool stop = false;
    std::uint64_t epoch = 0;
    int active = 0;

    // current job
    std::int64_t n = 0;
    std::int64_t grain = 1;
    const std::function<void(std::int64_t, std::int64_t)>* fn = nullptr;
    std::atomic<std::int64_t> cursor{0};

    void worker_loop() {
        g_inside_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock lk(m);
                cv_work.wait(lk, [&] { return stop || epoch != seen; });
                if (stop) return;
                seen = epoch;
            }
            run_chunks();
            {
                std::lock_guard lk(m);
                if (--active == 0) cv_done.notify_all();
            }
        }
    }

    void run_chunks() {
        for (;;) {
            const std::int64_t b = cursor.fetch_add(grain);
            if (b >= n) break;
            const std::int64_t e = std::min(n, b + grain);
            (*fn)(b, e);
        }
    }
};

ThreadPool::ThreadPool() : impl_(new Impl) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    impl_->nthreads = env_int("NANOTFM_THREADS", hw);
    if (impl_->nthreads < 1) impl_->nthreads = 1;
    for (int i = 1; i < impl_->nthreads; ++i)
        impl_->workers.emplace_back([this] { impl_->worker_loop(); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard lk(impl_->m);
        impl_->stop = true;
    }
    impl_->cv_work.notify_all();
    for (auto& w : impl_->workers) w.join();
    delete impl_;
}

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

int ThreadPool::threads() const { return impl_->nthreads; }

void ThreadPool::parallel_for(std::int64_t n, std::int64_t grain,
                              const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    if (impl_->nthreads == 1 || g_inside_worker || n <= grain) {
        fn(0, n);
        return;
    }
    {
        std::lock_guard lk(impl_->m);
        impl_->n = n;
        impl_->grain = grain;
        impl_->fn = &fn;
        impl_->cursor.store(0);
        impl_->active = impl_->nthreads - 1;
        ++impl_->epoch;
    }
    impl_->cv_work.notify_all();
    g_inside_worker = true;  // nested parallel_for from fn runs inline
    impl_->run_chunks();     // caller participates
    g_inside_worker = false;
    std::unique_lock lk(impl_->m);
    impl_->cv_done.wait(lk, [&] { return impl_->active == 0; });
}

}  // namespace nanotfm
