#pragma once

// Minimal deterministic work splitter. Each index is processed by exactly one
// worker and all per-index reductions stay inside that worker, so results are
// bitwise identical for any thread count. set_num_threads(1) forces fully
// serial execution (the harness --deterministic flag).

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace v2sfm {

inline int& thread_count_slot() {
    static int n = 1;
    return n;
}

inline void set_num_threads(int n) {
    thread_count_slot() = std::max(1, n);
}

inline int num_threads() { return thread_count_slot(); }

// fn(begin, end) over contiguous chunks of [0, n).
inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
    const int threads = std::min<std::int64_t>(num_threads(), n);
    if (threads <= 1 || n < 2) {
        if (n > 0) fn(0, n);
        return;
    }
    const std::int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads - 1));
    for (int t = 1; t < threads; ++t) {
        const std::int64_t b = t * chunk;
        const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(0, std::min<std::int64_t>(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace v2sfm
