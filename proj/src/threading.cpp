#include "ect/threading.hpp"

#include <atomic>
#include <cstdlib>

namespace ect {

namespace {
std::atomic<int> g_threads{0};  // 0 = auto

int resolve_default() {
    if (const char* env = std::getenv("ECT_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}
}  // namespace

int thread_count() {
    int t = g_threads.load(std::memory_order_relaxed);
    if (t <= 0) {
        t = resolve_default();
        g_threads.store(t, std::memory_order_relaxed);
    }
    return t;
}

void set_thread_count(int n) { g_threads.store(n > 0 ? n : 0, std::memory_order_relaxed); }

void parallel_chunks(std::int64_t n, int chunks,
                     const std::function<void(int, std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (chunks > n) chunks = static_cast<int>(n);
    if (chunks < 1) chunks = 1;

    auto bounds = [&](int c) {
        const std::int64_t lo = n * c / chunks;
        const std::int64_t hi = n * (c + 1) / chunks;
        return std::pair<std::int64_t, std::int64_t>{lo, hi};
    };

    const int workers = std::min(thread_count(), chunks);
    if (workers <= 1) {
        for (int c = 0; c < chunks; ++c) {
            auto [lo, hi] = bounds(c);
            fn(c, lo, hi);
        }
        return;
    }

    std::atomic<int> next{0};
    auto work = [&]() {
        for (;;) {
            const int c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= chunks) break;
            auto [lo, hi] = bounds(c);
            fn(c, lo, hi);
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    const int chunks = std::max(1, thread_count() * 4);
    parallel_chunks(n, chunks, [&](int, std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
}

}  // namespace ect
