#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace endomap {

void set_thread_count(int n);
int thread_count();

// Static partition of [begin,end); fn(i) must only write state owned by i,
// which keeps results independent of the thread count. The first exception
// thrown by a worker is rethrown on the calling thread.
template <typename Fn>
void parallel_for(int begin, int end, Fn&& fn) {
    const int n = end - begin;
    if (n <= 0) return;
    const int t = std::min(thread_count(), n);
    if (t <= 1) {
        for (int i = begin; i < end; ++i) fn(i);
        return;
    }
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (int k = 0; k < t; ++k) {
        const int lo = begin + static_cast<int>(static_cast<long long>(n) * k / t);
        const int hi = begin + static_cast<int>(static_cast<long long>(n) * (k + 1) / t);
        pool.emplace_back([lo, hi, &fn, &err, &mu] {
            try {
                for (int i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace endomap
