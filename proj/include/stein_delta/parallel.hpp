#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace stein_delta {

// Running mean and centred second moment (Welford), mergeable by the Chan et al. rule.
struct RunningMoments {
    double count = 0.0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        count += 1.0;
        const double delta = x - mean;
        mean += delta / count;
        m2 += delta * (x - mean);
    }
    static RunningMoments merge(const RunningMoments& a, const RunningMoments& b) {
        if (a.count == 0.0) return b;
        if (b.count == 0.0) return a;
        RunningMoments out;
        out.count = a.count + b.count;
        const double delta = b.mean - a.mean;
        out.mean = a.mean + delta * (b.count / out.count);
        out.m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / out.count);
        return out;
    }
    double variance() const { return count > 1.0 ? m2 / (count - 1.0) : 0.0; }
    double std_error() const { return count > 1.0 ? std::sqrt(variance() / count) : 0.0; }
};

using Channels = std::vector<RunningMoments>;

inline Channels merge_channels(const Channels& a, const Channels& b) {
    Channels out(a.size());
    for (std::size_t c = 0; c < a.size(); ++c) out[c] = RunningMoments::merge(a[c], b[c]);
    return out;
}

inline constexpr std::int64_t kReplicateBlock = 4096;

inline int default_thread_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs `body(begin, end, channels)` over fixed-size blocks of [0, total) and merges the
// block results in a pairwise tree. Block boundaries depend only on `total`, so the
// result is bitwise identical for every thread count.
inline Channels reduce_replicates(
    std::int64_t total, int channel_count, int threads,
    const std::function<void(std::int64_t, std::int64_t, Channels&)>& body) {
    const std::int64_t blocks = (total + kReplicateBlock - 1) / kReplicateBlock;
    std::vector<Channels> partial(static_cast<std::size_t>(blocks), Channels(channel_count));
    std::atomic<std::int64_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&] {
        try {
            for (std::int64_t b = next++; b < blocks; b = next++) {
                const std::int64_t begin = b * kReplicateBlock;
                const std::int64_t end = std::min(total, begin + kReplicateBlock);
                body(begin, end, partial[static_cast<std::size_t>(b)]);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = blocks;
        }
    };
    threads = std::max(1, std::min<int>(threads, static_cast<int>(std::max<std::int64_t>(blocks, 1))));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    if (blocks == 0) return Channels(channel_count);

    auto tree = [&](auto&& self, std::size_t lo, std::size_t hi) -> Channels {
        if (hi - lo == 1) return partial[lo];
        const std::size_t mid = lo + (hi - lo) / 2;
        return merge_channels(self(self, lo, mid), self(self, mid, hi));
    };
    return tree(tree, 0, partial.size());
}

}  // namespace stein_delta
