#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace kha::detail {

// Intra-op parallelism cap, read once from KHA_THREADS. Defaults to 1 so
// every run is bitwise reproducible without configuration; higher values
// stay deterministic because threads own disjoint output rows.
inline int intra_op_threads() {
    static const int n = [] {
        const char* s = std::getenv("KHA_THREADS");
        if (!s) return 1;
        int v = std::atoi(s);
        return std::clamp(v, 1, 256);
    }();
    return n;
}

template <typename Fn>
inline void parallel_rows(std::size_t m, std::size_t min_rows_per_thread, Fn&& fn) {
    const std::size_t want = static_cast<std::size_t>(intra_op_threads());
    std::size_t t = std::min(want, std::max<std::size_t>(1, m / min_rows_per_thread));
    if (t <= 1) {
        fn(std::size_t{0}, m);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(t);
    const std::size_t chunk = (m + t - 1) / t;
    for (std::size_t b = 0; b < m; b += chunk) {
        pool.emplace_back(fn, b, std::min(m, b + chunk));
    }
    for (auto& th : pool) th.join();
}

// C[m x p] (+)= A[m x k] * B[k x p]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
                    bool accumulate) {
    parallel_rows(m, 16, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            T* crow = c + i * p;
            if (!accumulate) {
                std::fill(crow, crow + p, T(0));
            }
            const T* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = b + kk * p;
                for (std::size_t j = 0; j < p; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
}

// C[m x p] (+)= A[m x k] * B[p x k]^T
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
                    bool accumulate) {
    parallel_rows(m, 16, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * p;
            for (std::size_t j = 0; j < p; ++j) {
                const T* brow = b + j * k;
                T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
                std::size_t kk = 0;
                for (; kk + 4 <= k; kk += 4) {
                    acc0 += arow[kk + 0] * brow[kk + 0];
                    acc1 += arow[kk + 1] * brow[kk + 1];
                    acc2 += arow[kk + 2] * brow[kk + 2];
                    acc3 += arow[kk + 3] * brow[kk + 3];
                }
                for (; kk < k; ++kk) acc0 += arow[kk] * brow[kk];
                const T dot = (acc0 + acc1) + (acc2 + acc3);
                crow[j] = accumulate ? crow[j] + dot : dot;
            }
        }
    });
}

// C[m x p] (+)= A[k x m]^T * B[k x p]
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
                    bool accumulate) {
    parallel_rows(m, 16, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            T* crow = c + i * p;
            if (!accumulate) {
                std::fill(crow, crow + p, T(0));
            }
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = a[kk * m + i];
                const T* brow = b + kk * p;
                for (std::size_t j = 0; j < p; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
}

}  // namespace kha::detail
