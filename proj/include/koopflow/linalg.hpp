#pragma once

#include <cmath>
#include <vector>

#include "koopflow/common.hpp"

namespace koopflow::linalg {

// Row-major dense matrix helpers for the solver-sized problems in this
// project (Newton steps, EDMD normal equations, Jacobian determinants).

struct Lu {
    long n = 0;
    std::vector<double> lu;   // packed L\U factors
    std::vector<long> piv;    // row permutation
    int sign = 1;
};

inline Lu lu_factor(std::vector<double> a, long n) {
    Lu f;
    f.n = n;
    f.lu = std::move(a);
    f.piv.resize(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) f.piv[i] = i;
    for (long k = 0; k < n; ++k) {
        long p = k;
        double best = std::abs(f.lu[k * n + k]);
        for (long i = k + 1; i < n; ++i) {
            double v = std::abs(f.lu[i * n + k]);
            if (v > best) { best = v; p = i; }
        }
        if (best == 0.0) throw NumericError("singular matrix in LU factorization");
        if (p != k) {
            for (long j = 0; j < n; ++j) std::swap(f.lu[k * n + j], f.lu[p * n + j]);
            std::swap(f.piv[k], f.piv[p]);
            f.sign = -f.sign;
        }
        double pivot = f.lu[k * n + k];
        for (long i = k + 1; i < n; ++i) {
            double m = f.lu[i * n + k] / pivot;
            f.lu[i * n + k] = m;
            for (long j = k + 1; j < n; ++j) f.lu[i * n + j] -= m * f.lu[k * n + j];
        }
    }
    return f;
}

// solves A x = b for one right-hand side
inline std::vector<double> lu_solve(const Lu& f, const std::vector<double>& b) {
    const long n = f.n;
    std::vector<double> x(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) x[i] = b[static_cast<std::size_t>(f.piv[i])];
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < i; ++j) x[i] -= f.lu[i * n + j] * x[j];
    for (long i = n - 1; i >= 0; --i) {
        for (long j = i + 1; j < n; ++j) x[i] -= f.lu[i * n + j] * x[j];
        x[i] /= f.lu[i * n + i];
    }
    return x;
}

// solves A X = B with B given column-wise as a row-major [n x k] matrix
inline std::vector<double> lu_solve_matrix(const Lu& f, const std::vector<double>& b, long k) {
    const long n = f.n;
    std::vector<double> x(static_cast<std::size_t>(n * k));
    std::vector<double> col(static_cast<std::size_t>(n));
    for (long j = 0; j < k; ++j) {
        for (long i = 0; i < n; ++i) col[i] = b[i * k + j];
        std::vector<double> sol = lu_solve(f, col);
        for (long i = 0; i < n; ++i) x[i * k + j] = sol[i];
    }
    return x;
}

inline std::vector<double> solve(const std::vector<double>& a, const std::vector<double>& b, long n) {
    return lu_solve(lu_factor(a, n), b);
}

inline double determinant(const std::vector<double>& a, long n) {
    Lu f;
    try {
        f = lu_factor(a, n);
    } catch (const NumericError&) {
        return 0.0;
    }
    double d = static_cast<double>(f.sign);
    for (long i = 0; i < n; ++i) d *= f.lu[i * n + i];
    return d;
}

inline double norm_inf(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double norm2_sq(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

}  // namespace koopflow::linalg
