#include "srunmix/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>

namespace srunmix {
namespace {

thread_local bool t_inside_worker = false;

struct Job {
    const std::function<void(std::size_t, std::size_t)>* body = nullptr;
    std::size_t n = 0;
    std::size_t grain = 1;
    std::size_t chunks = 0;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::exception_ptr error;
    std::mutex error_mutex;
};

class Pool {
public:
    explicit Pool(unsigned workers) {
        for (unsigned i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard lock(mutex_);
            stopping_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_) t.join();
    }

    unsigned size() const { return static_cast<unsigned>(threads_.size()) + 1; }

    void run(Job& job) {
        {
            std::lock_guard lock(mutex_);
            job_ = &job;
            ++generation_;
        }
        wake_.notify_all();
        t_inside_worker = true;
        drain(job);
        t_inside_worker = false;
        std::unique_lock lock(mutex_);
        finished_.wait(lock, [&] { return job.done.load() == job.chunks && active_ == 0; });
        job_ = nullptr;
    }

private:
    static void drain(Job& job) {
        for (;;) {
            const std::size_t c = job.next.fetch_add(1);
            if (c >= job.chunks) break;
            const std::size_t begin = c * job.grain;
            const std::size_t end = std::min(job.n, begin + job.grain);
            try {
                (*job.body)(begin, end);
            } catch (...) {
                std::lock_guard lock(job.error_mutex);
                if (!job.error) job.error = std::current_exception();
            }
            job.done.fetch_add(1);
        }
    }

    void worker_loop() {
        t_inside_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            Job* job = nullptr;
            {
                std::unique_lock lock(mutex_);
                wake_.wait(lock, [&] { return stopping_ || (job_ != nullptr && generation_ != seen); });
                if (stopping_) return;
                seen = generation_;
                job = job_;
                ++active_;
            }
            drain(*job);
            {
                std::lock_guard lock(mutex_);
                --active_;
            }
            finished_.notify_all();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable finished_;
    Job* job_ = nullptr;
    std::uint64_t generation_ = 0;
    unsigned active_ = 0;
    bool stopping_ = false;
};

std::mutex g_run_mutex;
std::mutex g_pool_mutex;
unsigned g_requested = 0;
std::unique_ptr<Pool> g_pool;

unsigned resolve(unsigned count) {
    if (count != 0) return count;
    return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace

void set_thread_count(unsigned count) {
    std::lock_guard run_lock(g_run_mutex);
    std::lock_guard lock(g_pool_mutex);
    g_requested = count;
    g_pool.reset();
}

unsigned thread_count() {
    std::lock_guard lock(g_pool_mutex);
    return g_pool ? g_pool->size() : resolve(g_requested);
}

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    grain = std::max<std::size_t>(grain, 1);
    const std::size_t chunks = (n + grain - 1) / grain;
    if (chunks == 1 || t_inside_worker) {
        for (std::size_t c = 0; c < chunks; ++c) {
            body(c * grain, std::min(n, (c + 1) * grain));
        }
        return;
    }
    // One job at a time; concurrent top-level callers serialize here.
    std::lock_guard run_lock(g_run_mutex);
    std::unique_lock lock(g_pool_mutex);
    const unsigned threads = resolve(g_requested);
    if (threads <= 1) {
        lock.unlock();
        t_inside_worker = true;
        try {
            for (std::size_t c = 0; c < chunks; ++c) {
                body(c * grain, std::min(n, (c + 1) * grain));
            }
        } catch (...) {
            t_inside_worker = false;
            throw;
        }
        t_inside_worker = false;
        return;
    }
    if (!g_pool) g_pool = std::make_unique<Pool>(threads - 1);
    Pool* pool = g_pool.get();
    lock.unlock();
    Job job;
    job.body = &body;
    job.n = n;
    job.grain = grain;
    job.chunks = chunks;
    pool->run(job);
    if (job.error) std::rethrow_exception(job.error);
}

double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 8) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double parallel_sum(std::size_t n, std::size_t grain,
                    const std::function<double(std::size_t, std::size_t)>& body) {
    if (n == 0) return 0.0;
    grain = std::max<std::size_t>(grain, 1);
    const std::size_t chunks = (n + grain - 1) / grain;
    std::vector<double> partial(chunks, 0.0);
    parallel_for(chunks, 1, [&](std::size_t cb, std::size_t ce) {
        for (std::size_t c = cb; c < ce; ++c) {
            partial[c] = body(c * grain, std::min(n, (c + 1) * grain));
        }
    });
    return pairwise_sum(partial);
}

}  // namespace srunmix
