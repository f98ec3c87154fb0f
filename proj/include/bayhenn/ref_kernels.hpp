#pragma once

#include <cstdint>

#include "bayhenn/ring.hpp"

// Serial reference kernels. These are deliberately naive, independent
// implementations kept as oracles for the fast paths: the schoolbook product
// never touches the NTT, and the float kernels never touch OpenMP. The
// bench_kernels tool compares both families against the production kernels.

namespace bayhenn::ref {

// O(n^2) negacyclic convolution: X^n reduces to -1. Coefficient domain only.
RingElement negacyclic_mul_schoolbook(const RingElement& a, const RingElement& b);

// y[r] = sum_k W[r*cols + k] * x[k], plain loops.
void matvec_serial(const double* W, uint32_t rows, uint32_t cols, const double* x, double* y);

// C = A(m x k) * B(k x n), row-major, plain loops.
void gemm_serial(const double* A, const double* B, double* C, uint32_t m, uint32_t k, uint32_t n);

}  // namespace bayhenn::ref
