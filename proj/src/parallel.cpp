#include "mvfbdsde/parallel.hpp"

#include <atomic>

namespace mvfb {

namespace {
std::atomic<std::size_t> g_threads{0};
}

void set_thread_count(std::size_t n) { g_threads.store(n); }

std::size_t thread_count() {
    const std::size_t n = g_threads.load();
    if (n != 0) return n;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

}  // namespace mvfb
