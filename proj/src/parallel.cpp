#include "cprf/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

#include "cprf/error.hpp"

namespace cprf {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::InvalidDimension: return "invalid-dimension";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::EmptyForest: return "empty-forest";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Estimation: return "estimation";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Resource: return "resource";
    case ErrorKind::Io: return "io";
    }
    return "unknown";
}

unsigned default_workers() {
    if (const char* env = std::getenv("CPRF_WORKERS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (...) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, unsigned workers,
                  const std::function<void(std::size_t)>& fn) {
    if (count == 0) return;
    if (workers == 0) workers = default_workers();
    const std::size_t nthreads = std::min<std::size_t>(workers, count);
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }

    std::vector<std::exception_ptr> errors(nthreads);
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t w = 0; w < nthreads; ++w) {
        const std::size_t begin = count * w / nthreads;
        const std::size_t end = count * (w + 1) / nthreads;
        pool.emplace_back([&, w, begin, end] {
            for (std::size_t i = begin; i < end; ++i) {
                try {
                    fn(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    // blocks are ordered by index, so the first failing block holds the lowest index
    for (std::size_t w = 0; w < nthreads; ++w)
        if (errors[w]) std::rethrow_exception(errors[w]);
}

} // namespace cprf
