#pragma once

namespace dtcmr {

/// Caps the worker count used inside library calls; n <= 0 restores the default.
void set_thread_count(int n);
int thread_count();

/// Applies DTCMR_THREADS when set. Returns the resulting worker count.
int configure_threads_from_env();

}  // namespace dtcmr
