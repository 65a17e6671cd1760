#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace tpsido {

inline std::atomic<int>& thread_setting() {
    static std::atomic<int> k{1};
    return k;
}

inline void set_threads(int k) { thread_setting() = std::max(1, k); }
inline int threads() { return thread_setting(); }

// Runs body(i) for i in [0, n). Each index owns its output slot, so results do not depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
    const auto k = static_cast<std::size_t>(std::min<int>(threads(), static_cast<int>(std::max<std::size_t>(n, 1))));
    if (k <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < k; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n && !failed;) {
                try {
                    body(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace tpsido
