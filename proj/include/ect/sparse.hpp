#pragma once

#include <cstdint>
#include <vector>

#include "ect/common.hpp"

namespace ect {

// Compressed sparse row matrix. Only square symmetric matrices are used here,
// so the same buffers double as CSC when a column view is needed.
struct CsrMatrix {
    std::int32_t n = 0;
    std::vector<std::int32_t> row_ptr;  // size n+1
    std::vector<std::int32_t> col;
    std::vector<double> val;

    std::int64_t nnz() const { return static_cast<std::int64_t>(col.size()); }

    // y = A x
    void multiply(const double* x, double* y) const;

    double row_dot(std::int32_t row, const double* x) const {
        double acc = 0.0;
        for (std::int32_t k = row_ptr[row]; k < row_ptr[row + 1]; ++k)
            acc += val[k] * x[col[k]];
        return acc;
    }

    double row_sum(std::int32_t row) const {
        double acc = 0.0;
        for (std::int32_t k = row_ptr[row]; k < row_ptr[row + 1]; ++k) acc += val[k];
        return acc;
    }
};

struct CgResult {
    std::int64_t iterations = 0;
    double rel_residual = 0.0;
    bool converged = false;
};

// Jacobi-preconditioned conjugate gradients for SPD systems, 64-bit
// throughout. Converges when the true residual satisfies ||b - Ax|| <=
// tol * ||b||; the recurrence residual is periodically re-evaluated against
// the true one to guard against drift. x holds the initial guess on entry.
CgResult cg_solve(const CsrMatrix& A, const std::vector<double>& b, std::vector<double>& x,
                  double tol, std::int64_t max_iters);

}  // namespace ect
