#pragma once

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace muse {

// Worker cap: min(hardware, MUSE_THREADS). Results must not depend on the
// worker count, so parallel loops write per-index output slots only.
inline int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("MUSE_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

template <class F>
inline void parallel_for(int n, F&& f) {
    const int workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int k = 0; k < workers; ++k)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
        });
    for (auto& t : pool) t.join();
}

} // namespace muse
