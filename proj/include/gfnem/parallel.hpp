#pragma once

#include <cstddef>
#include <exception>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gfnem {

// Data-parallel loop over [0, n). Each index must write only to its own
// slots; reductions belong to the caller, done serially in index order so
// results do not depend on the thread count. parallel_for_serial is the
// reference implementation used by tests and the kernel benchmark.

template <class Fn>
void parallel_for_serial(size_t n, Fn&& fn) {
    for (size_t i = 0; i < n; ++i) fn(i);
}

template <class Fn>
void parallel_for(size_t n, Fn&& fn) {
#ifdef _OPENMP
    std::vector<std::exception_ptr> errors(n);
    #pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        try {
            fn(static_cast<size_t>(i));
        } catch (...) {
            errors[static_cast<size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);  // first failing index wins
#else
    parallel_for_serial(n, fn);
#endif
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace gfnem
