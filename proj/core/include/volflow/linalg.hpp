#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "volflow/errors.hpp"

namespace volflow {

/// Small dense row-major square-matrix helpers used to initialize the
/// invertible channel-mixing layers. Double precision throughout.

/// Random matrix with standard-normal entries -> orthogonal Q via
/// Householder QR, with the sign convention diag(R) > 0 so Q is the
/// unique orthogonal factor (Haar-distributed for Gaussian input).
std::vector<double> random_orthogonal(int n, std::uint64_t seed);

struct LuFactors {
    std::vector<int> perm;       ///< row permutation: row i of PA is row perm[i] of A
    std::vector<double> lower;   ///< unit lower triangular (diag implicit 1)
    std::vector<double> upper;   ///< upper triangular, incl. diagonal
};

/// LU with partial pivoting: A[perm[i]][j] = (L U)[i][j].
/// Throws NumericError for singular input.
LuFactors lu_decompose(const std::vector<double>& a, int n);

/// C = A * B for n x n row-major.
std::vector<double> matmul(const std::vector<double>& a,
                           const std::vector<double>& b, int n);

}  // namespace volflow
