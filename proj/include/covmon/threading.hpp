#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace covmon {

// Runs fn(i) for i in [0, n) over `workers` threads. Work is split into
// contiguous chunks so per-item outputs can be merged in index order to keep
// results independent of the worker count.
inline void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
    if (workers <= 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int t = static_cast<int>(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(t));
    for (int w = 0; w < t; ++w) {
        int64_t begin = n * w / t, end = n * (w + 1) / t;
        pool.emplace_back([&fn, begin, end] {
            for (int64_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace covmon
