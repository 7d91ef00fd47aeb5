#pragma once

namespace robself {

// Internal data-parallelism cap. Resolves once from ROBSELF_THREADS (falling
// back to hardware concurrency); set_max_threads overrides, e.g. when bench
// runs pairs in parallel.
int max_threads();
void set_max_threads(int n);

}  // namespace robself
