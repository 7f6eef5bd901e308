#pragma once

// Thin wrapper over OpenBLAS sgemm. The substrate pins BLAS to one thread;
// parallelism happens at the sample/design level so runs stay deterministic.

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace metalattice {

inline void pin_blas_single_thread() { openblas_set_num_threads(1); }

// Row-major C = alpha * op(A) * op(B) + beta * C
inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                  const float* a, int lda, const float* b, int ldb, float beta,
                  float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

} // namespace metalattice
