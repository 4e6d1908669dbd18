#include "nanotfm/pool.hpp"

#include <mutex>
#include <unordered_map>
#include <vector>

namespace nanotfm::detail {

namespace {

// blocks below this go straight to the system allocator
constexpr std::size_t kPoolMinBytes = 1 << 12;

struct Pool {
    std::mutex m;
    std::unordered_map<std::size_t, std::vector<void*>> buckets;

    ~Pool() {
        for (auto& [size, blocks] : buckets)
            for (void* p : blocks) ::operator delete(p);
    }
};

Pool& pool() {
    static Pool* p = new Pool;  // leaked deliberately: outlives all tensors
    return *p;
}

}  // namespace

void* pool_acquire(std::size_t bytes) {
    if (bytes < kPoolMinBytes) return ::operator new(bytes);
    {
        auto& pl = pool();
        std::lock_guard lk(pl.m);
        auto it = pl.buckets.find(bytes);
        if (it != pl.buckets.end() && !it->second.empty()) {
            void* p = it->second.back();
            it->second.pop_back();
            return p;
        }
    }
    return ::operator new(bytes);
}

void pool_release(void* p, std::size_t bytes) noexcept {
    if (!p) return;
    if (bytes < kPoolMinBytes) {
        ::operator delete(p);
        return;
    }
    auto& pl = pool();
    std::lock_guard lk(pl.m);
    pl.buckets[bytes].push_back(p);
}

}  // namespace nanotfm::detail
