#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace srunmix {

// Work is always split into chunks whose boundaries depend only on the
// problem size, never on the thread count. Each chunk is executed by exactly
// one thread, and reductions combine per-chunk partials in index order, so
// results are bit-identical for any number of threads.

/// Sets the worker count used by parallel_for (0 selects hardware concurrency).
void set_thread_count(unsigned count);
unsigned thread_count();

/// Calls body(begin, end) over [0, n) split in chunks of at most `grain` items.
/// Nested calls from inside a worker run serially on the calling thread.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body);

/// Sum of per-chunk partial results, combined with a fixed pairwise tree.
double parallel_sum(std::size_t n, std::size_t grain,
                    const std::function<double(std::size_t, std::size_t)>& body);

/// Pairwise (tree) summation; deterministic for a fixed input order.
double pairwise_sum(std::span<const double> values);

/// Default grain used by element-wise kernels.
inline constexpr std::size_t kDefaultGrain = 4096;

}  // namespace srunmix
