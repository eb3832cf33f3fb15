#include "agconv/parallel.hpp"

#include <algorithm>

namespace agconv {

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

ThreadPool::ThreadPool() {
    set_threads(1);
}

ThreadPool::~ThreadPool() {
    stop_workers();
}

void ThreadPool::set_threads(int n) {
    if (n <= 0) {
        n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0)
            n = 1;
    }
    if (n == n_threads_ && (n == 1 || !workers_.empty()))
        return;
    stop_workers();
    n_threads_ = n;
    if (n > 1)
        start_workers(n - 1); // the calling thread participates too
}

void ThreadPool::start_workers(int n) {
    {
        std::lock_guard<std::mutex> lk(mu_);
        shutting_down_ = false;
    }
    for (int i = 0; i < n; ++i)
        workers_.emplace_back([this] { worker_loop(); });
}

void ThreadPool::stop_workers() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        shutting_down_ = true;
    }
    cv_job_.notify_all();
    for (auto& w : workers_)
        w.join();
    workers_.clear();
}

void ThreadPool::worker_loop() {
    std::uint64_t seen_job = 0;
    for (;;) {
        const std::function<void(std::size_t, std::size_t)>* fn = nullptr;
        std::size_t n = 0, chunk = 0;
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_job_.wait(lk, [&] { return shutting_down_ || job_id_ != seen_job; });
            if (shutting_down_)
                return;
            seen_job = job_id_;
            fn = job_fn_;
            n = job_n_;
            chunk = job_chunk_;
        }
        for (;;) {
            std::size_t begin = next_chunk_.fetch_add(chunk);
            if (begin >= n)
                break;
            (*fn)(begin, std::min(begin + chunk, n));
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            --pending_workers_;
        }
        cv_done_.notify_one();
    }
}

void ThreadPool::run(std::size_t n, std::size_t chunk,
                     const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0)
        return;
    if (chunk == 0)
        chunk = 1;
    if (n_threads_ <= 1 || workers_.empty() || n <= chunk) {
        fn(0, n);
        return;
    }
    {
        std::lock_guard<std::mutex> lk(mu_);
        job_fn_ = &fn;
        job_n_ = n;
        job_chunk_ = chunk;
        next_chunk_.store(0);
        pending_workers_ = workers_.size();
        ++job_id_;
    }
    cv_job_.notify_all();
    // Participate in the same chunk queue.
    for (;;) {
        std::size_t begin = next_chunk_.fetch_add(chunk);
        if (begin >= n)
            break;
        fn(begin, std::min(begin + chunk, n));
    }
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return pending_workers_ == 0; });
    job_fn_ = nullptr;
}

} // namespace agconv
