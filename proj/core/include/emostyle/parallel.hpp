#pragma once

#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "emostyle/errors.hpp"

namespace emostyle {

// Worker cap from EMOSTYLE_THREADS. Unset: hardware concurrency. 0: one
// worker (single-threaded deterministic mode; results are order-reduced and
// thus identical at any count, but 0 also removes scheduling overhead).
inline unsigned worker_count() {
    const char* env = std::getenv("EMOSTYLE_THREADS");
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (env == nullptr || *env == '\0') return hw;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 0)
        throw ValidationError("EMOSTYLE_THREADS must be a non-negative integer, got '" + std::string(env) + "'");
    if (v == 0) return 1;
    return static_cast<unsigned>(v);
}

// Runs fn(i) for i in [0, n). With one worker this is a plain loop; with
// more, indices are dealt round-robin. fn writes only to its own index's
// output slot, so the caller's later reduction in index order is
// bit-identical for every worker count. Exceptions propagate from worker 0's
// rethrow in index order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const unsigned workers = worker_count();
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned t = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    std::vector<std::exception_ptr> errs(t);
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (unsigned w = 0; w < t; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = w; i < n; i += t) fn(i);
            } catch (...) {
                errs[w] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errs)
        if (e) std::rethrow_exception(e);
}

}  // namespace emostyle
