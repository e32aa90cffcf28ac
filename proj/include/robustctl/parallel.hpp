#pragma once

#include <condition_variable>
#include <exception>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace rctl {

/// Fixed set of workers that split an index range into contiguous chunks.
///
/// Chunk boundaries depend only on the range length and the worker count, and
/// every index is processed by exactly one worker.
class WorkerPool {
 public:
  explicit WorkerPool(int threads = 1);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  int size() const { return threads_; }

  /// Calls fn(begin, end) over a partition of [0, count) and waits for all chunks.
  void run(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn);

 private:
  void worker_loop(int id);

  int threads_;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t, std::size_t)>* task_ = nullptr;
  std::size_t count_ = 0;
  std::size_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

}  // namespace rctl
