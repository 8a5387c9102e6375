#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace neft {

/// Worker-thread cap, from NEFT_THREADS. Defaults to 1 (fully serial);
/// values are clamped to [1, hardware_concurrency].
inline int worker_threads() {
    const char* env = std::getenv("NEFT_THREADS");
    long n = 1;
    if (env != nullptr) {
        char* end = nullptr;
        n = std::strtol(env, &end, 10);
        if (end == env || n < 1) n = 1;
    }
    long hw = static_cast<long>(std::thread::hardware_concurrency());
    if (hw > 0 && n > hw) n = hw;
    return static_cast<int>(n);
}

/// Runs fn(i) for i in [0, count). Each index is owned by exactly one
/// worker, so per-index results are identical no matter the thread count.
template <typename Fn>
void parallel_for(std::int64_t count, Fn&& fn) {
    int threads = worker_threads();
    if (threads <= 1 || count <= 1) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    if (threads > count) threads = static_cast<int>(count);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    std::int64_t chunk = (count + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = lo + chunk < count ? lo + chunk : count;
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace neft
