#include "parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace fishseg {

namespace {
std::atomic<int> g_thread_cap{1};  // conservative default; CLI/API raise it
}

void set_thread_cap(int n) {
    g_thread_cap.store(n < 0 ? 0 : n);
}

int thread_cap() { return g_thread_cap.load(); }

int effective_workers(int count) {
    int cap = g_thread_cap.load();
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (cap == 0 || cap > hw) cap = hw;
    return std::max(1, std::min(cap, count));
}

void parallel_for(int count, const std::function<void(int)>& fn) {
    if (count <= 0) return;
    const int workers = effective_workers(count);
    if (workers == 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    const int block = (count + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const int lo = w * block;
        const int hi = std::min(count, lo + block);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace fishseg
