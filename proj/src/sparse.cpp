#include "ect/sparse.hpp"

#include <cmath>

namespace ect {

void CsrMatrix::multiply(const double* x, double* y) const {
    for (std::int32_t r = 0; r < n; ++r) {
        double acc = 0.0;
        const std::int32_t end = row_ptr[r + 1];
        for (std::int32_t k = row_ptr[r]; k < end; ++k) acc += val[k] * x[col[k]];
        y[r] = acc;
    }
}

namespace {
double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }
}  // namespace

CgResult cg_solve(const CsrMatrix& A, const std::vector<double>& b, std::vector<double>& x,
                  double tol, std::int64_t max_iters) {
    const std::size_t n = static_cast<std::size_t>(A.n);
    x.resize(n, 0.0);

    std::vector<double> inv_diag(n, 1.0);
    for (std::int32_t r = 0; r < A.n; ++r) {
        for (std::int32_t k = A.row_ptr[r]; k < A.row_ptr[r + 1]; ++k) {
            if (A.col[k] == r && A.val[k] != 0.0) inv_diag[r] = 1.0 / A.val[k];
        }
    }

    const double bnorm = norm2(b);
    CgResult res;
    if (bnorm == 0.0) {
        x.assign(n, 0.0);
        res.converged = true;
        return res;
    }
    const double target = tol * bnorm;

    std::vector<double> r(n), z(n), p(n), q(n);

    // (Re)computes the true residual; returns its norm.
    auto refresh_residual = [&]() {
        A.multiply(x.data(), q.data());
        for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - q[i];
        return norm2(r);
    };

    double rnorm = refresh_residual();
    std::int64_t iters = 0;
    while (rnorm > target && iters < max_iters) {
        for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
        p = z;
        double rho = dot(r, z);
        // Inner recurrence; re-checks the true residual on apparent convergence.
        while (iters < max_iters) {
            A.multiply(p.data(), q.data());
            const double pq = dot(p, q);
            if (pq <= 0.0) break;  // loss of positive definiteness in recurrence
            const double alpha = rho / pq;
            for (std::size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
            for (std::size_t i = 0; i < n; ++i) r[i] -= alpha * q[i];
            ++iters;
            rnorm = norm2(r);
            if (rnorm <= target) break;
            for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
            const double rho_next = dot(r, z);
            const double beta = rho_next / rho;
            rho = rho_next;
            for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
        }
        rnorm = refresh_residual();
    }

    res.iterations = iters;
    res.rel_residual = rnorm / bnorm;
    res.converged = rnorm <= target;
    return res;
}

}  // namespace ect
