#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dsplats {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / dimension mismatches. Message always carries both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Bad argument values (invalid rig size, threshold out of range, ...).
struct ValueError : Error {
    using Error::Error;
};

// File I/O and serialization failures; message carries the path.
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

[[noreturn]] inline void throw_shape_mismatch(const std::string& op, const std::vector<int>& a,
                                              const std::vector<int>& b) {
    throw ShapeError(op + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// ---------------------------------------------------------------------------
// Seeding and random numbers.
//
// All randomness in the project flows through Rng so that runs are bit-exact
// reproducible for a fixed seed. normal() is hand-rolled Box-Muller over the
// raw engine: the state is exactly the mt19937_64 state, which serializes
// cleanly into checkpoints.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derive an independent stream seed from a base seed and a stream index.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ull));
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next() { return eng_(); }

    // Uniform in [0, 1): 53 mantissa bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    // Standard normal via Box-Muller; consumes two engine draws per call.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    Rng fork(uint64_t stream) const {
        // fork() does not advance the parent; streams are keyed off the
        // original seed material held in the engine state hash.
        std::ostringstream os;
        os << eng_;
        uint64_t h = 1469598103934665603ull;
        for (char c : os.str()) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
        return Rng(derive_seed(h, stream));
    }

    std::string serialize_state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void restore_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw IoError("Rng::restore_state: corrupt engine state");
    }

private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Internal parallelism.
//
// DSPLATS_THREADS caps the worker count. Work is split into chunk ranges that
// depend only on the problem size, never on the thread count, and reductions
// combine per-chunk partials in chunk order, so results are deterministic for
// any thread count.
// ---------------------------------------------------------------------------

inline int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("DSPLATS_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return n;
}

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(thread_count() - 1);
        return pool;
    }

    ~ThreadPool() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    // Runs fn(chunk) for chunk in [0, n_chunks); blocks until all finish.
    // The calling thread participates.
    void run(int64_t n_chunks, const std::function<void(int64_t)>& fn) {
        if (n_chunks <= 0) return;
        if (threads_.empty() || n_chunks == 1) {
            for (int64_t c = 0; c < n_chunks; ++c) fn(c);
            return;
        }
        {
            std::lock_guard lk(mu_);
            task_ = &fn;
            next_ = 0;
            total_ = n_chunks;
            pending_ = n_chunks;
            ++generation_;
        }
        cv_.notify_all();
        work_loop();
        std::unique_lock lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        task_ = nullptr;
    }

private:
    explicit ThreadPool(int helpers) {
        for (int i = 0; i < helpers; ++i)
            threads_.emplace_back([this] { helper_loop(); });
    }

    void work_loop() {
        const std::function<void(int64_t)>* task;
        {
            std::lock_guard lk(mu_);
            task = task_;
        }
        if (!task) return;
        int64_t total = total_.load();
        while (true) {
            int64_t c = next_.fetch_add(1, std::memory_order_relaxed);
            if (c >= total) break;
            (*task)(c);
            if (pending_.fetch_sub(1) == 1) {
                std::lock_guard lk(mu_);
                done_cv_.notify_all();
            }
        }
    }

    void helper_loop() {
        uint64_t seen = 0;
        while (true) {
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (task_ && generation_ != seen); });
                if (stop_) return;
                seen = generation_;
            }
            work_loop();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int64_t)>* task_ = nullptr;
    std::atomic<int64_t> next_{0};
    std::atomic<int64_t> total_{0};
    std::atomic<int64_t> pending_{0};
    uint64_t generation_ = 0;
    bool stop_ = false;
};

// Disjoint-write loop: fn(begin, end) over fixed grain-sized ranges.
template <class Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
    if (n <= 0) return;
    int64_t chunks = (n + grain - 1) / grain;
    ThreadPool::instance().run(chunks, [&](int64_t c) {
        int64_t b = c * grain;
        int64_t e = std::min(n, b + grain);
        fn(b, e);
    });
}

// Deterministic reduction: per-chunk partials combined in chunk order.
template <class T, class Map, class Combine>
T parallel_reduce(int64_t n, int64_t grain, T init, Map&& map_fn, Combine&& combine) {
    if (n <= 0) return init;
    int64_t chunks = (n + grain - 1) / grain;
    std::vector<T> partial(static_cast<size_t>(chunks), init);
    ThreadPool::instance().run(chunks, [&](int64_t c) {
        int64_t b = c * grain;
        int64_t e = std::min(n, b + grain);
        partial[static_cast<size_t>(c)] = map_fn(b, e);
    });
    T acc = init;
    for (auto& p : partial) acc = combine(acc, p);
    return acc;
}

}  // namespace dsplats
