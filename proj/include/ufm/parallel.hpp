#ifndef UFM_PARALLEL_HPP
#define UFM_PARALLEL_HPP

#include <functional>

#include "ufm/types.hpp"

namespace ufm {

/// Upper bound on worker threads used by parallel_for (default 1).
void set_max_threads(int count);
int max_threads();

/// Runs fn(k) for k in [0, n) on up to max_threads() threads using a static
/// partition. Each k must write only its own output slot, so results do not
/// depend on the thread count. Calls made from inside a worker run serially.
void parallel_for(Index n, const std::function<void(Index)>& fn);

}  // namespace ufm

#endif  // UFM_PARALLEL_HPP
