#pragma once

#include <functional>

namespace wscloc::util {

// Static partition of [0, n) over the given worker count. Each index is
// processed exactly once; callers write disjoint output slots, so results do
// not depend on the thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace wscloc::util
