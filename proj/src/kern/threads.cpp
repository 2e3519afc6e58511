#include "divot/threads.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace divot::kern {
namespace {

int read_worker_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("DIVOTLAB_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) hw = std::min(v, hw);
  }
  return hw;
}

// Lazy shared pool. One chunked loop runs at a time; the submitting thread
// participates, so a pool of size N has N-1 helper threads. Chunks are claimed
// off a shared counter, but every chunk writes a disjoint range, so output is
// independent of which thread claims what.
class Pool {
public:
  static Pool& get() {
    static Pool p(read_worker_count());
    return p;
  }

  int size() const { return size_; }

  void run(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    if (size_ == 1 || n <= grain) {
      fn(0, n);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(m_);
      job_fn_ = &fn;
      job_n_ = n;
      job_grain_ = grain;
      next_.store(0, std::memory_order_relaxed);
      pending_ = size_ - 1;
      ++epoch_;
    }
    cv_.notify_all();
    work();
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

private:
  explicit Pool(int size) : size_(size) {
    for (int i = 1; i < size_; ++i)
      threads_.emplace_back([this] { worker_loop(); });
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
      }
      work();
      {
        std::lock_guard<std::mutex> lk(m_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  void work() {
    for (;;) {
      const int64_t begin = next_.fetch_add(job_grain_, std::memory_order_relaxed);
      if (begin >= job_n_) break;
      (*job_fn_)(begin, std::min(begin + job_grain_, job_n_));
    }
  }

  const int size_;
  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0, job_grain_ = 1;
  std::atomic<int64_t> next_{0};
  int pending_ = 0;
  uint64_t epoch_ = 0;
};

}  // namespace

int worker_count() { return Pool::get().size(); }

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) { Pool::get().run(n, grain, fn); }

}  // namespace divot::kern
