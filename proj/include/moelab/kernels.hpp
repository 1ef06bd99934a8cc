#pragma once

#include <cstdint>

namespace moelab::num {

#ifdef MOELAB_SINGLE_PRECISION
using Scalar = float;
#else
using Scalar = double;
#endif

// Low-level dense kernels behind the tensor ops. Each kernel exists in a
// serial reference form and an OpenMP form. The parallel form splits work by
// output row only, so every output element is reduced in the same order as
// the serial form and the two produce bit-identical results (this is checked
// by tests and by the kernel_bench tool).
namespace kernels {

enum class Mode {
    kAuto,      // parallel when the problem is large enough
    kSerial,    // always the reference path
    kParallel,  // always the OpenMP path
};

void set_mode(Mode m);
Mode mode();

// C[m x n] = (accumulate ? C : 0) + op(A) * op(B), where op transposes when
// the corresponding flag is set. A is stored [m x k] (or [k x m] when
// trans_a), B is stored [k x n] (or [n x k] when trans_b). trans_a && trans_b
// is not supported.
void matmul(const Scalar* a, const Scalar* b, Scalar* c, int64_t m, int64_t k,
            int64_t n, bool trans_a, bool trans_b, bool accumulate);

void matmul_serial(const Scalar* a, const Scalar* b, Scalar* c, int64_t m,
                   int64_t k, int64_t n, bool trans_a, bool trans_b,
                   bool accumulate);

void matmul_parallel(const Scalar* a, const Scalar* b, Scalar* c, int64_t m,
                     int64_t k, int64_t n, bool trans_a, bool trans_b,
                     bool accumulate);

// Row-wise softmax with max subtraction: out[r, :] = softmax(x[r, :]).
void softmax_rows(const Scalar* x, Scalar* out, int64_t rows, int64_t cols);
void softmax_rows_serial(const Scalar* x, Scalar* out, int64_t rows,
                         int64_t cols);
void softmax_rows_parallel(const Scalar* x, Scalar* out, int64_t rows,
                           int64_t cols);

}  // namespace kernels

// Global multiply-accumulate counter fed by matmul when counting mode is on.
// Normal training leaves it disabled and pays no bookkeeping cost.
class MacCounter {
  public:
    static void enable(bool on);
    static bool enabled();
    static void reset();
    static void add(uint64_t macs);
    static uint64_t total();
};

}  // namespace moelab::num
