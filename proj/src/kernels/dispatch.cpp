#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "flowkd/error.hpp"
#include "flowkd/kernels/kernels.hpp"

namespace flowkd::kernels {

namespace {

// The training loop allocates and frees multi-megabyte im2col panels every
// call. Keep them in the arena instead of returning pages to the kernel, or
// each reuse pays mmap + page-zeroing.
struct MallocTuning {
  MallocTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  }
};
const MallocTuning g_malloc_tuning;

// one long-lived worker; the caller runs the second half itself
class Worker {
 public:
  Worker() : thread_([this] { loop(); }) {}
  ~Worker() {
    stop_.store(true);
    cv_.notify_all();
    thread_.join();
  }

  void run(const std::function<void()>& task) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      task_ = &task;
      done_.store(false, std::memory_order_release);
      has_task_.store(true, std::memory_order_release);
    }
    cv_.notify_all();
  }

  void wait() {
    // short spin covers the common case of sub-millisecond kernels
    for (int i = 0; i < 20000; ++i) {
      if (done_.load(std::memory_order_acquire)) return;
    }
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [this] { return done_.load(std::memory_order_acquire); });
  }

 private:
  void loop() {
    for (;;) {
      const std::function<void()>* task = nullptr;
      // spin briefly for a new task before parking on the condvar
      for (int i = 0; i < 20000 && task == nullptr; ++i) {
        if (stop_) return;
        if (has_task_.load(std::memory_order_acquire)) {
          std::lock_guard<std::mutex> lk(mu_);
          task = task_;
          task_ = nullptr;
          has_task_.store(false, std::memory_order_release);
        }
      }
      if (task == nullptr) {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return stop_ || task_ != nullptr; });
        if (stop_) return;
        task = task_;
        task_ = nullptr;
        has_task_.store(false, std::memory_order_release);
      }
      (*task)();
      {
        // the store must be under the mutex or a waiter that just failed its
        // predicate check could miss the only notification
        std::lock_guard<std::mutex> lk(mu_);
        done_.store(true, std::memory_order_release);
      }
      cv_done_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, cv_done_;
  const std::function<void()>* task_ = nullptr;
  std::atomic<bool> has_task_{false};
  std::atomic<bool> done_{true};
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

Worker& worker() {
  static Worker w;
  return w;
}

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<const Backend*> g_active{nullptr};

const Backend* pick_default() {
  const char* env = std::getenv("FLOWKD_KERNELS");
  std::string want = env ? env : "auto";
  if (want == "scalar") return &scalar_backend();
  if (want == "avx2") {
    require(avx2_backend_available(), Err::ConfigInvalid,
            "FLOWKD_KERNELS=avx2 but AVX2 backend unavailable on this CPU/build");
    return &avx2_backend();
  }
  return avx2_backend_available() ? &avx2_backend() : &scalar_backend();
}

}  // namespace

bool avx2_backend_available() {
#if FLOWKD_HAVE_AVX2_BACKEND
  return cpu_supports_avx2();
#else
  return false;
#endif
}

#if !FLOWKD_HAVE_AVX2_BACKEND
const Backend& avx2_backend() {
  fail(Err::ConfigInvalid, "binary built without AVX2 backend");
}
#endif

const Backend& active() {
  const Backend* b = g_active.load(std::memory_order_acquire);
  if (!b) {
    b = pick_default();
    g_active.store(b, std::memory_order_release);
  }
  return *b;
}

int num_threads() {
  static const int n = [] {
    if (const char* env = std::getenv("FLOWKD_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return std::min(v, 2);
    }
    // shared-memory bandwidth makes the split a wash on small machines, so
    // the worker is opt-in
    return 1;
  }();
  return n;
}

void parallel_2(const std::function<void()>& first, const std::function<void()>& second) {
  if (num_threads() < 2) {
    first();
    second();
    return;
  }
  worker().run(first);
  second();
  worker().wait();
}

void gemm_nn_mt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  const Backend& b = active();
  const int64_t work = static_cast<int64_t>(M) * N * K;
  if (num_threads() < 2 || M < 2 || work < (1 << 21)) {
    b.gemm_nn(M, N, K, A, B, C, accumulate);
    return;
  }
  const int m0 = (M + 1) / 2;
  parallel_2([&] { b.gemm_nn(m0, N, K, A, B, C, accumulate); },
             [&] {
               b.gemm_nn(M - m0, N, K, A + static_cast<int64_t>(m0) * K, B,
                         C + static_cast<int64_t>(m0) * N, accumulate);
             });
}

void gemm_nt_mt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
  const Backend& b = active();
  const int64_t work = static_cast<int64_t>(M) * N * K;
  if (num_threads() < 2 || work < (1 << 21)) {
    b.gemm_nt(M, N, K, A, B, C, accumulate);
    return;
  }
  if (M >= 2) {
    const int m0 = (M + 1) / 2;
    parallel_2([&] { b.gemm_nt(m0, N, K, A, B, C, accumulate); },
               [&] {
                 b.gemm_nt(M - m0, N, K, A + static_cast<int64_t>(m0) * K, B,
                           C + static_cast<int64_t>(m0) * N, accumulate);
               });
    return;
  }
  // single row: split over N (disjoint C columns, B rows)
  const int n0 = (N + 1) / 2;
  parallel_2([&] { b.gemm_nt(M, n0, K, A, B, C, accumulate); },
             [&] {
               b.gemm_nt(M, N - n0, K, A, B + static_cast<int64_t>(n0) * K, C + n0, accumulate);
             });
}

void set_backend(const std::string& name) {
  if (name == "scalar") {
    g_active.store(&scalar_backend(), std::memory_order_release);
  } else if (name == "avx2") {
    require(avx2_backend_available(), Err::ConfigInvalid, "AVX2 backend unavailable");
    g_active.store(&avx2_backend(), std::memory_order_release);
  } else if (name == "auto") {
    g_active.store(avx2_backend_available() ? &avx2_backend() : &scalar_backend(),
                   std::memory_order_release);
  } else {
    fail(Err::ConfigInvalid, "unknown kernel backend '" + name + "'");
  }
}

std::string active_name() { return active().name; }

}  // namespace flowkd::kernels
