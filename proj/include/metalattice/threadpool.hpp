#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace metalattice {

// Worker count: METALATTICE_WORKERS env var caps the pool, defaulting to
// hardware concurrency.
inline int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("METALATTICE_WORKERS")) {
        int cap = std::atoi(env);
        if (cap >= 1) return std::min(hw, cap) < 1 ? 1 : std::min(cap, 64);
    }
    return hw;
}

// Runs fn(i) for i in [0,n) on up to `workers` threads. Tasks are claimed
// through an atomic counter; each task must write only its own outputs so
// results are identical regardless of scheduling.
inline void parallel_for(std::int64_t n, int workers, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    workers = std::min<std::int64_t>(workers, n);
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&]() {
            for (;;) {
                std::int64_t i = next.fetch_add(1);
                if (i >= n) break;
                fn(i);
            }
        });
    }
    for (auto& t : threads) t.join();
}

} // namespace metalattice
