#include "robself/runtime.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace robself {

namespace {

// Iteration loops allocate and free the same multi-megabyte tensors
// repeatedly; keep those blocks on the heap instead of round-tripping mmap.
[[maybe_unused]] const bool malloc_tuned = [] {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
    return true;
}();

int resolve_default() {
    if (const char* env = std::getenv("ROBSELF_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

std::atomic<int>& cap() {
    static std::atomic<int> value{resolve_default()};
    return value;
}

}  // namespace

int max_threads() { return cap().load(std::memory_order_relaxed); }

void set_max_threads(int n) { cap().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

}  // namespace robself
