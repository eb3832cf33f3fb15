#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace agconv {

// Persistent worker pool for data-parallel loops over disjoint output ranges.
//
// Work is split into fixed-size chunks that do not depend on the worker
// count, and every chunk writes a disjoint slice of the output, so results
// are bit-identical for any thread setting.
class ThreadPool {
public:
    static ThreadPool& instance();

    // n = 0 picks the hardware concurrency. Takes effect immediately.
    void set_threads(int n);
    int threads() const { return n_threads_; }

    // Calls fn(begin, end) over chunks of [0, n) with the given chunk size.
    void run(std::size_t n, std::size_t chunk,
             const std::function<void(std::size_t, std::size_t)>& fn);

    ~ThreadPool();

private:
    ThreadPool();
    void start_workers(int n);
    void stop_workers();
    void worker_loop();

    std::vector<std::thread> workers_;
    int n_threads_ = 1;

    std::mutex mu_;
    std::condition_variable cv_job_;
    std::condition_variable cv_done_;
    const std::function<void(std::size_t, std::size_t)>* job_fn_ = nullptr;
    std::size_t job_n_ = 0;
    std::size_t job_chunk_ = 0;
    std::atomic<std::size_t> next_chunk_{0};
    std::size_t pending_workers_ = 0;
    std::uint64_t job_id_ = 0;
    bool shutting_down_ = false;
};

// Convenience wrapper around the global pool.
inline void parallel_for(std::size_t n, std::size_t chunk,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    ThreadPool::instance().run(n, chunk, fn);
}

} // namespace agconv
