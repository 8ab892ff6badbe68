#pragma once

/** @file core.hpp
    @brief Error types, small value types and the thread-count controlled parallel map shared by all modules.
*/

#include <algorithm>
#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace cemgms {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Vector = Eigen::VectorXd;
using Index = std::size_t;

// The size is written as a conversion so that Dim is never deduced from an array
// argument (std::array's size is size_t); it always comes from a grid or partition.
template <int Dim>
using Point = std::array<double, static_cast<std::size_t>(Dim)>;

template <int Dim>
using MultiIndex = std::array<int, static_cast<std::size_t>(Dim)>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (bad sizes, out-of-domain shapes, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Data that fails a physical or structural check (nonpositive permeability, ...).
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Linear or nonlinear solver breakdown.
class SolverError : public Error {
public:
  using Error::Error;
};

/// File system and format failures.
class IoError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline std::mutex &log_mutex()
{
  static std::mutex m;
  return m;
}

inline std::atomic<int> &thread_override()
{
  static std::atomic<int> n{0};
  return n;
}

} // namespace detail

inline void warn(const std::string &msg)
{
  std::lock_guard<std::mutex> lock(detail::log_mutex());
  std::cerr << "cemgms: warning: " << msg << '\n';
}

/// Overrides the worker count; 0 restores the environment/hardware default.
inline void set_thread_count(int n) { detail::thread_override().store(std::max(0, n)); }

/// Worker count: explicit override, then $CEMGMS_THREADS, then hardware concurrency.
inline int thread_count()
{
  if (int n = detail::thread_override().load(); n > 0)
    return n;
  if (const char *env = std::getenv("CEMGMS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0)
      return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/**
 * @brief Runs body(i) for i in [0, n) on a static partition of workers.
 *
 * Each index is handled exactly once and results must be written to per-index
 * slots, so the outcome does not depend on the worker count. The first
 * exception thrown by any worker is rethrown on the calling thread.
 */
template <class Body>
void parallel_for(Index n, Body &&body)
{
  const Index workers = std::min<Index>(static_cast<Index>(thread_count()), n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i)
      body(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::atomic<Index> next{0};
  auto run = [&] {
    for (Index i = next++; i < n; i = next++) {
      try {
        body(i);
      }
      catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error)
          first_error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (Index w = 1; w < workers; ++w)
    pool.emplace_back(run);
  run();
  for (auto &t : pool)
    t.join();
  if (first_error)
    std::rethrow_exception(first_error);
}

template <int Dim>
constexpr int corners_per_cell() { return 1 << Dim; }

} // namespace cemgms
