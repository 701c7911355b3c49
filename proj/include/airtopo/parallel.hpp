#pragma once

#include <cstdint>
#include <functional>

namespace airtopo {

// Process-wide worker count used by data-parallel passes. Thread count must
// never change results: workers only ever write disjoint output ranges and
// all reductions happen sequentially afterwards.
void set_thread_count(int threads);
int thread_count();

// Static-partition parallel loop over [0, n). fn receives (begin, end).
void parallel_chunks(std::int64_t n,
                     const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace airtopo
