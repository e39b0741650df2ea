#pragma once

#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace cosmos {

// Worker-thread budget: COSMOS_THREADS when set (minimum 1), otherwise the
// hardware count capped at 8.
inline std::size_t thread_budget() {
    if (const char* env = std::getenv("COSMOS_THREADS")) {
        const long v = std::atol(env);
        return v < 1 ? 1 : static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : std::min<std::size_t>(hw, 8);
}

// Runs fn(i) for i in [0, n) with a static partition, so each index is
// processed by exactly one thread and results land in caller-owned slots
// regardless of scheduling. The first worker exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
    const std::size_t budget = std::min(thread_budget(), n);
    if (budget <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (std::size_t t = 0; t < budget; ++t) {
        const std::size_t lo = n * t / budget;
        const std::size_t hi = n * (t + 1) / budget;
        workers.emplace_back([&, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace cosmos
