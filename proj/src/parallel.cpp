#include "evalnet/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace evalnet {

int worker_count() {
    static const int count = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (const char* env = std::getenv("EVALNET_THREADS")) {
            const int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return count;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    const int workers = worker_count();
    if (workers <= 1 || n < 2) {
        body(0, n);
        return;
    }
    const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    const std::size_t chunk = (n + t - 1) / t;
    std::vector<std::thread> pool;
    pool.reserve(t - 1);
    for (std::size_t w = 1; w < t; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace evalnet
