#pragma once

#include <cstddef>
#include <functional>

namespace neuron_probe {

/// Worker count: NEURON_PROBE_THREADS if set, otherwise hardware concurrency.
std::size_t worker_count();

/// Calls fn(i) for every i in [0, n), spreading indices over worker threads.
/// Callers write results into per-index slots, so output never depends on
/// scheduling. The first exception thrown by any call is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace neuron_probe
