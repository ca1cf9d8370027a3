#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "structdgp/linalg.hpp"

namespace sdgp {

/// Worker count: `requested` if positive, otherwise STRUCTDGP_THREADS, otherwise
/// the hardware concurrency. Always at least 1.
inline int worker_count(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("STRUCTDGP_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls f(i) for i in [0, n) on up to `threads` workers using a static
/// partition. Callers write results into per-index slots and reduce them in
/// index order afterwards, so the outcome does not depend on scheduling.
template <class F>
void parallel_for(Index n, int threads, F&& f) {
  const int w = static_cast<int>(std::min<Index>(std::max(threads, 1), std::max<Index>(n, 1)));
  if (w <= 1) {
    for (Index i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(w));
  const Index chunk = (n + w - 1) / w;
  for (int k = 0; k < w; ++k) {
    const Index lo = k * chunk;
    const Index hi = std::min(n, lo + chunk);
    pool.emplace_back([&, k, lo, hi] {
      try {
        for (Index i = lo; i < hi; ++i) f(i);
      } catch (...) {
        errors[static_cast<size_t>(k)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace sdgp
