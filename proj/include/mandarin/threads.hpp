#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mandarin {

// Worker count: MANDARIN_THREADS caps it, hardware concurrency bounds it.
inline int worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    int n = hw == 0 ? 1 : static_cast<int>(hw);
    if (const char* env = std::getenv("MANDARIN_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Splits [0, n) into one contiguous chunk per worker and runs fn(worker, begin, end)
// on each. Results must be written to per-worker slots; the caller merges them in
// worker-index order, which keeps reductions deterministic regardless of scheduling.
inline void parallel_chunks(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn) {
    const int workers = std::min<std::size_t>(worker_count(), std::max<std::size_t>(n, 1));
    if (workers <= 1 || n == 0) {
        fn(0, 0, n);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        const std::size_t begin = std::min(n, static_cast<std::size_t>(w) * chunk);
        const std::size_t end = std::min(n, begin + chunk);
        threads.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
    }
    for (auto& t : threads) t.join();
}

}  // namespace mandarin
