#pragma once

// Job runner for the seeds-parallel experiment repetitions. Each job owns its
// outputs (its own subdirectory, its own result slot), so the schedule cannot
// influence results and runs stay deterministic at any thread count.

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pcdde {

// PCDDE_LAB_THREADS caps worker threads; unset or unparsable falls back to
// the hardware count, and anything below one becomes one.
inline std::size_t thread_cap() {
    if (const char* s = std::getenv("PCDDE_LAB_THREADS")) {
        char* end = nullptr;
        unsigned long v = std::strtoul(s, &end, 10);
        if (end != s && *end == '\0') return v >= 1 ? static_cast<std::size_t>(v) : 1;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw >= 1 ? hw : 1;
}

// Runs job(0..count-1); the first exception thrown by any job is rethrown
// after every worker has stopped.
inline void run_jobs(std::size_t count, const std::function<void(std::size_t)>& job,
                     std::size_t cap = thread_cap()) {
    if (cap > count) cap = count;
    if (cap <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (first_error) return;
            }
            try {
                job(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(cap);
    for (std::size_t t = 0; t < cap; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pcdde
