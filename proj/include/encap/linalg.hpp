// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_LINALG_HPP_
#define ENCAP_LINALG_HPP_

#include <cstddef>

namespace encap::linalg
{

// Row-major kernels; C is accumulated into, never cleared.

/// C[p x r] += A[p x q] * B[q x r]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
                    std::size_t r)
{
    for (std::size_t i = 0; i < p; ++i) {
        double* ci = c + i * r;
        const double* ai = a + i * q;
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = ai[k];
            if (aik == 0.0)
                continue;
            const double* bk = b + k * r;
            for (std::size_t j = 0; j < r; ++j)
                ci[j] += aik * bk[j];
        }
    }
}

/// C[p x r] += A[p x q] * B[r x q]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
                    std::size_t r)
{
    for (std::size_t i = 0; i < p; ++i) {
        const double* ai = a + i * q;
        double* ci = c + i * r;
        for (std::size_t j = 0; j < r; ++j) {
            const double* bj = b + j * q;
            double s = 0.0;
            for (std::size_t k = 0; k < q; ++k)
                s += ai[k] * bj[k];
            ci[j] += s;
        }
    }
}

/// C[q x r] += A[p x q]^T * B[p x r]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
                    std::size_t r)
{
    for (std::size_t k = 0; k < p; ++k) {
        const double* ak = a + k * q;
        const double* bk = b + k * r;
        for (std::size_t i = 0; i < q; ++i) {
            const double aki = ak[i];
            if (aki == 0.0)
                continue;
            double* ci = c + i * r;
            for (std::size_t j = 0; j < r; ++j)
                ci[j] += aki * bk[j];
        }
    }
}

} // namespace encap::linalg

#endif // ENCAP_LINALG_HPP_
