#include "moelab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "moelab/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moelab::num {

namespace kernels {

namespace {

Mode g_mode = Mode::kAuto;

// Below this many multiply-accumulates the OpenMP fork/join overhead
// dominates on small desk models.
constexpr int64_t kParallelMacThreshold = 1 << 15;

template <bool kAccumulate>
void matmul_rows(const Scalar* a, const Scalar* b, Scalar* c, int64_t k,
                 int64_t n, bool trans_a, bool trans_b, int64_t m_all,
                 int64_t i0, int64_t i1) {
    if (!trans_a && !trans_b) {
        for (int64_t i = i0; i < i1; ++i) {
            Scalar* crow = c + i * n;
            if (!kAccumulate) std::fill(crow, crow + n, Scalar(0));
            const Scalar* arow = a + i * k;
            for (int64_t l = 0; l < k; ++l) {
                const Scalar av = arow[l];
                const Scalar* brow = b + l * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // B stored [n x k]; C[i,j] = dot(A[i,:], B[j,:]).
        for (int64_t i = i0; i < i1; ++i) {
            const Scalar* arow = a + i * k;
            Scalar* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const Scalar* brow = b + j * k;
                Scalar acc = 0;
                for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
                if (kAccumulate) {
                    crow[j] += acc;
                } else {
                    crow[j] = acc;
                }
            }
        }
    } else {
        // A stored [k x m]; C[i,j] = sum_l A[l,i] * B[l,j].
        for (int64_t i = i0; i < i1; ++i) {
            Scalar* crow = c + i * n;
            if (!kAccumulate) std::fill(crow, crow + n, Scalar(0));
            for (int64_t l = 0; l < k; ++l) {
                const Scalar av = a[l * m_all + i];
                const Scalar* brow = b + l * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

void set_mode(Mode m) { g_mode = m; }
Mode mode() { return g_mode; }

void matmul_serial(const Scalar* a, const Scalar* b, Scalar* c, int64_t m,
                   int64_t k, int64_t n, bool trans_a, bool trans_b,
                   bool accumulate) {
    if (trans_a && trans_b) throw ContractError("matmul: trans_a && trans_b unsupported");
    if (accumulate) {
        matmul_rows<true>(a, b, c, k, n, trans_a, trans_b, m, 0, m);
    } else {
        matmul_rows<false>(a, b, c, k, n, trans_a, trans_b, m, 0, m);
    }
}

void matmul_parallel(const Scalar* a, const Scalar* b, Scalar* c, int64_t m,
                     int64_t k, int64_t n, bool trans_a, bool trans_b,
                     bool accumulate) {
    if (trans_a && trans_b) throw ContractError("matmul: trans_a && trans_b unsupported");
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        if (accumulate) {
            matmul_rows<true>(a, b, c, k, n, trans_a, trans_b, m, i, i + 1);
        } else {
            matmul_rows<false>(a, b, c, k, n, trans_a, trans_b, m, i, i + 1);
        }
    }
#else
    matmul_serial(a, b, c, m, k, n, trans_a, trans_b, accumulate);
#endif
}

void matmul(const Scalar* a, const Scalar* b, Scalar* c, int64_t m, int64_t k,
            int64_t n, bool trans_a, bool trans_b, bool accumulate) {
    bool parallel = false;
    switch (g_mode) {
        case Mode::kSerial: parallel = false; break;
        case Mode::kParallel: parallel = true; break;
        case Mode::kAuto: parallel = m * k * n >= kParallelMacThreshold; break;
    }
    if (parallel) {
        matmul_parallel(a, b, c, m, k, n, trans_a, trans_b, accumulate);
    } else {
        matmul_serial(a, b, c, m, k, n, trans_a, trans_b, accumulate);
    }
}

namespace {

// The denominator is summed in ascending value order, so the result is
// independent of any permutation of the lane (routing equivariance depends
// on this).
inline void softmax_row(const Scalar* x, Scalar* out, int64_t cols) {
    Scalar mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    for (int64_t j = 0; j < cols; ++j) out[j] = std::exp(x[j] - mx);
    std::vector<Scalar> sorted(out, out + cols);
    std::sort(sorted.begin(), sorted.end());
    Scalar sum = 0;
    for (Scalar v : sorted) sum += v;
    const Scalar inv = Scalar(1) / sum;
    for (int64_t j = 0; j < cols; ++j) out[j] *= inv;
}

}  // namespace

void softmax_rows_serial(const Scalar* x, Scalar* out, int64_t rows,
                         int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) softmax_row(x + r * cols, out + r * cols, cols);
}

void softmax_rows_parallel(const Scalar* x, Scalar* out, int64_t rows,
                           int64_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) softmax_row(x + r * cols, out + r * cols, cols);
#else
    softmax_rows_serial(x, out, rows, cols);
#endif
}

void softmax_rows(const Scalar* x, Scalar* out, int64_t rows, int64_t cols) {
    bool parallel = false;
    switch (g_mode) {
        case Mode::kSerial: parallel = false; break;
        case Mode::kParallel: parallel = true; break;
        case Mode::kAuto: parallel = rows * cols >= (1 << 14); break;
    }
    if (parallel) {
        softmax_rows_parallel(x, out, rows, cols);
    } else {
        softmax_rows_serial(x, out, rows, cols);
    }
}

}  // namespace kernels

namespace {
bool g_mac_enabled = false;
uint64_t g_mac_total = 0;
}  // namespace

void MacCounter::enable(bool on) { g_mac_enabled = on; }
bool MacCounter::enabled() { return g_mac_enabled; }
void MacCounter::reset() { g_mac_total = 0; }
void MacCounter::add(uint64_t macs) { g_mac_total += macs; }
uint64_t MacCounter::total() { return g_mac_total; }

}  // namespace moelab::num
