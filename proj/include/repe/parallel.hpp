#pragma once

// Order-preserving parallel map over an index range. Each item writes only
// its own output slot, so results are bitwise identical for any thread count.
// REPE_THREADS caps the worker count; unset falls back to the hardware count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace repe {

inline std::size_t worker_count(std::size_t n_items) {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("REPE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) hw = static_cast<std::size_t>(v);
    }
    return std::min(hw, std::max<std::size_t>(n_items, 1));
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = worker_count(n);
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace repe
