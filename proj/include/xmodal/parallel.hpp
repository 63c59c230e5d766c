#pragma once

#include <cstddef>
#include <functional>

namespace xmodal {

// Worker count used by every parallel section. 0 selects hardware concurrency.
void set_num_threads(int threads);
int num_threads();

// Runs fn(i) for i in [begin, end) over contiguous chunks, one chunk per
// worker. Callers must write only to outputs owned by index i, which keeps
// results independent of the worker count.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn);

}  // namespace xmodal
