#pragma once

#include <algorithm>
#include <thread>
#include <vector>

#include "cvattn/common.hpp"

namespace cvattn {

/// Process-wide worker count bound (CLI --threads). Defaults to 1; results
/// are identical for any value because work is split over disjoint outputs
/// and every per-output accumulation keeps a fixed serial order.
inline int& thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) { thread_count() = std::max(1, n); }

template <typename F>
void parallel_for(Index begin, Index end, F&& fn) {
    const Index n = end - begin;
    const int workers = static_cast<int>(std::min<Index>(thread_count(), n));
    if (workers <= 1 || n < 4) {
        for (Index i = begin; i < end; ++i) fn(i);
        return;
    }
    const Index chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        const Index lo = begin + w * chunk;
        const Index hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (Index i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace cvattn
