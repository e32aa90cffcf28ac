#include "robustctl/parallel.hpp"

#include <algorithm>
#include <exception>

namespace rctl {

namespace {

std::pair<std::size_t, std::size_t> chunk(std::size_t count, int parts, int id) {
  std::size_t base = count / static_cast<std::size_t>(parts);
  std::size_t extra = count % static_cast<std::size_t>(parts);
  auto uid = static_cast<std::size_t>(id);
  std::size_t begin = uid * base + std::min(uid, extra);
  return {begin, begin + base + (uid < extra ? 1 : 0)};
}

}  // namespace

WorkerPool::WorkerPool(int threads) : threads_(std::max(1, threads)) {
  for (int id = 1; id < threads_; ++id) workers_.emplace_back([this, id] { worker_loop(id); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  start_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

void WorkerPool::worker_loop(int id) {
  std::size_t seen = 0;
  for (;;) {
    const std::function<void(std::size_t, std::size_t)>* task;
    std::size_t count;
    {
      std::unique_lock lock(mutex_);
      start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      task = task_;
      count = count_;
    }
    auto [begin, end] = chunk(count, threads_, id);
    std::exception_ptr err;
    try {
      if (begin < end) (*task)(begin, end);
    } catch (...) {
      err = std::current_exception();
    }
    {
      std::lock_guard lock(mutex_);
      if (err && !error_) error_ = err;
      if (--pending_ == 0) done_cv_.notify_one();
    }
  }
}

void WorkerPool::run(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
  if (threads_ == 1) {
    if (count > 0) fn(0, count);
    return;
  }
  {
    std::lock_guard lock(mutex_);
    task_ = &fn;
    count_ = count;
    pending_ = threads_ - 1;
    error_ = nullptr;
    ++generation_;
  }
  start_cv_.notify_all();
  std::exception_ptr err;
  auto [begin, end] = chunk(count, threads_, 0);
  try {
    if (begin < end) fn(begin, end);
  } catch (...) {
    err = std::current_exception();
  }
  std::unique_lock lock(mutex_);
  done_cv_.wait(lock, [&] { return pending_ == 0; });
  if (!err) err = error_;
  if (err) std::rethrow_exception(err);
}

}  // namespace rctl
