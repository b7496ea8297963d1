#include "kv2ct/common.hpp"

#include <algorithm>
#include <cstdlib>

namespace kv2ct {

Axis axis_from_string(const std::string& s) {
    if (s == "RL" || s == "R-L" || s == "x") return Axis::RL;
    if (s == "AP" || s == "A-P" || s == "y") return Axis::AP;
    if (s == "SI" || s == "S-I" || s == "z") return Axis::SI;
    throw ConfigError("invalid axis '" + s + "' (expected R-L, A-P or S-I)");
}

int worker_count() {
    static int cached = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        if (const char* env = std::getenv("KV2CT_THREADS")) {
            int cap = std::atoi(env);
            if (cap > 0) n = std::min(n, cap);
        }
        return n;
    }();
    return cached;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    int workers = worker_count();
    if (n <= 0) return;
    if (workers <= 1 || n < 256) {
        body(0, n);
        return;
    }
    workers = static_cast<int>(std::min<std::int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        std::int64_t lo = w * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace kv2ct
