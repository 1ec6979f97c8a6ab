#include "dtcmr/parallel.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {
#ifdef _OPENMP
const int g_default_threads = omp_get_max_threads();
#endif
}  // namespace

void set_thread_count(int n) {
#ifdef _OPENMP
    omp_set_num_threads(n > 0 ? n : g_default_threads);
#else
    (void)n;
#endif
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int configure_threads_from_env() {
    if (const char* env = std::getenv("DTCMR_THREADS")) {
        try {
            set_thread_count(std::stoi(env));
        } catch (const std::exception&) {
            throw Error(std::string("DTCMR_THREADS is not an integer: ") + env);
        }
    }
    return thread_count();
}

}  // namespace dtcmr
