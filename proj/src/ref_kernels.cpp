#include "bayhenn/ref_kernels.hpp"

#include <stdexcept>

namespace bayhenn::ref {

RingElement negacyclic_mul_schoolbook(const RingElement& a, const RingElement& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("schoolbook: empty element");
    if (!a.params().same_ring(b.params())) throw std::invalid_argument("schoolbook: parameter mismatch");
    if (a.domain() != Domain::Coeff || b.domain() != Domain::Coeff)
        throw std::invalid_argument("schoolbook: operands must be in coefficient domain");
    const uint64_t q = a.params().q;
    const uint32_t n = a.params().n;
    RingElement r(a.params_ptr(), Domain::Coeff);
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    auto bc = b.coeffs();
    for (uint32_t i = 0; i < n; ++i) {
        if (ac[i] == 0) continue;
        for (uint32_t j = 0; j < n; ++j) {
            if (bc[j] == 0) continue;
            uint64_t prod = modops::mul_mod(ac[i], bc[j], q);
            uint32_t k = i + j;
            if (k < n) {
                rc[k] = modops::add_mod(rc[k], prod, q);
            } else {
                // wraparound flips the sign
                rc[k - n] = modops::sub_mod(rc[k - n], prod, q);
            }
        }
    }
    return r;
}

void matvec_serial(const double* W, uint32_t rows, uint32_t cols, const double* x, double* y) {
    for (uint32_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* row = W + static_cast<size_t>(r) * cols;
        for (uint32_t k = 0; k < cols; ++k) acc += row[k] * x[k];
        y[r] = acc;
    }
}

void gemm_serial(const double* A, const double* B, double* C, uint32_t m, uint32_t k, uint32_t n) {
    for (uint32_t i = 0; i < m; ++i)
        for (uint32_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (uint32_t p = 0; p < k; ++p) acc += A[i * k + p] * B[p * n + j];
            C[i * n + j] = acc;
        }
}

}  // namespace bayhenn::ref
